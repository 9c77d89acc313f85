//! On-disk formats: feature matrices, alignment files, TSV manifests and
//! text-pair files.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::{Utterance, WordInterval};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"WACOFEAT";
pub const MANIFEST_HEADER: &str = "id\tfeatures\tn_frames\ttranscript\ttranslation";
pub const TEXT_PAIR_HEADER: &str = "id\ttranscript\ttranslation";

/// Serializes a `n_frames × feat_dim` matrix as `f32` little-endian.
pub fn encode_features(features: &Tensor) -> Vec<u8> {
    let (n, d) = features.shape();
    let mut buf = Vec::with_capacity(16 + n * d * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::data("feature file has a malformed header"));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload = &bytes[16..];
    if payload.len() != n * d * 4 {
        return Err(Error::data(format!(
            "feature payload holds {} bytes, header promises {n}x{d} floats",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::from_vec(n, d, data))
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    std::fs::write(path, encode_features(features)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Checks the interval invariants against an utterance of `n_frames` frames.
pub fn validate_intervals(intervals: &[WordInterval], n_frames: usize) -> Result<()> {
    let mut prev_end = 0;
    for (i, iv) in intervals.iter().enumerate() {
        if iv.start >= iv.end {
            return Err(Error::data(format!("interval {i} ({}) is empty or reversed", iv.word)));
        }
        if iv.end > n_frames {
            return Err(Error::data(format!(
                "interval {i} ({}) ends at frame {} beyond n_frames {n_frames}",
                iv.word, iv.end
            )));
        }
        if iv.start < prev_end {
            return Err(Error::data(format!("interval {i} ({}) overlaps or is out of order", iv.word)));
        }
        prev_end = iv.end;
    }
    Ok(())
}

pub fn format_alignment(intervals: &[WordInterval]) -> String {
    intervals.iter().map(|iv| format!("{}\t{}\t{}\n", iv.word, iv.start, iv.end)).collect()
}

pub fn parse_alignment(text: &str, n_frames: usize) -> Result<Vec<WordInterval>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::data(format!("alignment line {}: bad frame index {s:?}", n + 1)))
        };
        if fields.len() != 3 {
            return Err(Error::data(format!("alignment line {} has {} fields, expected 3", n + 1, fields.len())));
        }
        out.push(WordInterval { word: fields[0].to_string(), start: parse(fields[1])?, end: parse(fields[2])? });
    }
    validate_intervals(&out, n_frames)?;
    Ok(out)
}

pub fn load_alignment(path: &Path, n_frames: usize) -> Result<Vec<WordInterval>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alignment(&text, n_frames).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_alignment(path: &Path, intervals: &[WordInterval]) -> Result<()> {
    std::fs::write(path, format_alignment(intervals)).map_err(|e| Error::io(path, e))
}

fn features_rel(id: &str) -> String {
    format!("features/{id}.feat")
}

fn alignment_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("align").join(format!("{id}.align"))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `utterances` as `<dir>/<name>.tsv`, with feature files under
/// `<dir>/features/` and alignments under `<dir>/align/`. Rows are sorted by id.
pub fn write_manifest(dir: &Path, name: &str, utterances: &[Utterance]) -> Result<PathBuf> {
    create_dir(&dir.join("features"))?;
    create_dir(&dir.join("align"))?;
    let mut sorted: Vec<&Utterance> = utterances.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for u in sorted {
        let rel = features_rel(&u.id);
        write_features(&dir.join(&rel), &u.features)?;
        if let Some(iv) = &u.word_intervals {
            write_alignment(&alignment_path(dir, &u.id), iv)?;
        }
        let translation = u.translation.as_ref().map(|t| t.join(" ")).unwrap_or_default();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            u.id,
            rel,
            u.n_frames(),
            u.transcript.join(" "),
            translation
        ));
    }
    let path = dir.join(format!("{name}.tsv"));
    std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn split_words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Loads a manifest and everything it references. Alignment files are optional.
pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::data(format!("{}: malformed manifest header", path.display())));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row = n + 2;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::data(format!("{} row {row}: expected 5 columns, found {}", path.display(), fields.len())));
        }
        let id = fields[0].to_string();
        let n_frames: usize = fields[2]
            .parse()
            .map_err(|_| Error::data(format!("{} row {row} ({id}): bad n_frames {:?}", path.display(), fields[2])))?;
        let features = read_features(&dir.join(fields[1]))
            .map_err(|e| Error::data(format!("{} row {row} ({id}): {e}", path.display())))?;
        if features.rows() != n_frames {
            return Err(Error::data(format!(
                "{} row {row} ({id}): manifest says {n_frames} frames, feature file has {}",
                path.display(),
                features.rows()
            )));
        }
        let align_path = alignment_path(dir, &id);
        let word_intervals = if align_path.exists() {
            Some(
                load_alignment(&align_path, n_frames)
                    .map_err(|e| Error::data(format!("{} row {row} ({id}): {e}", path.display())))?,
            )
        } else {
            None
        };
        let translation = (!fields[4].is_empty()).then(|| split_words(fields[4]));
        out.push(Utterance { id, features, transcript: split_words(fields[3]), translation, word_intervals });
    }
    Ok(out)
}

/// A transcript/translation pair without speech.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPair {
    pub id: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
}

pub fn write_text_pairs(path: &Path, pairs: &[TextPair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = String::from(TEXT_PAIR_HEADER);
    body.push('\n');
    for p in pairs {
        body.push_str(&format!("{}\t{}\t{}\n", p.id, p.source.join(" "), p.target.join(" ")));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn load_text_pairs(path: &Path) -> Result<Vec<TextPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(TEXT_PAIR_HEADER) {
        return Err(Error::data(format!("{}: malformed text-pair header", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::data(format!("{} row {}: expected 3 columns", path.display(), n + 2)));
            }
            Ok(TextPair { id: f[0].to_string(), source: split_words(f[1]), target: split_words(f[2]) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(id: &str, n: usize) -> Utterance {
        let data = (0..n * 3).map(|i| (i as f32 * 0.37 - 1.1) as f64).collect();
        Utterance {
            id: id.into(),
            features: Tensor::from_vec(n, 3, data),
            transcript: vec!["kato".into(), "mire".into()],
            translation: Some(vec!["telu".into(), "pona".into()]),
            word_intervals: Some(vec![
                WordInterval { word: "kato".into(), start: 1, end: 3 },
                WordInterval { word: "mire".into(), start: 4, end: n },
            ]),
        }
    }

    #[test]
    fn features_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = utt("a", 7).features;
        let p = dir.path().join("x.feat");
        write_features(&p, &t).unwrap();
        let back = read_features(&p).unwrap();
        assert_eq!(back, t);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"WACOFEAT");
        assert_eq!(bytes.len(), 16 + 7 * 3 * 4);
    }

    #[test]
    fn truncated_features_rejected() {
        let mut bytes = encode_features(&utt("a", 4).features);
        bytes.pop();
        assert!(decode_features(&bytes).is_err());
        assert!(decode_features(b"NOTMAGIC\0\0\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut asr = utt("b", 6);
        asr.translation = None;
        let us = vec![utt("c", 8), asr];
        let path = write_manifest(dir.path(), "train", &us).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], us[1]);
        assert_eq!(back[1], us[0]);
    }

    #[test]
    fn missing_feature_file_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "train", &[utt("gone", 5)]).unwrap();
        std::fs::remove_file(dir.path().join("features/gone.feat")).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("gone"), "{err}");
    }

    #[test]
    fn alignment_past_end_rejected() {
        assert!(parse_alignment("kato\t0\t4\nmire\t4\t9\n", 8).is_err());
        assert!(parse_alignment("kato\t0\t4\nmire\t3\t6\n", 8).is_err());
        assert!(parse_alignment("kato\t2\t2\n", 8).is_err());
        let ok = parse_alignment("kato\t0\t4\nmire\t5\t8\n", 8).unwrap();
        assert_eq!(format_alignment(&ok), "kato\t0\t4\nmire\t5\t8\n");
    }

    #[test]
    fn bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "id\tfeatures\n").unwrap();
        assert!(load_manifest(&p).is_err());
    }

    #[test]
    fn text_pairs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mt.tsv");
        let pairs = vec![TextPair { id: "m1".into(), source: vec!["kato".into()], target: vec!["telu".into(), ".".into()] }];
        write_text_pairs(&p, &pairs).unwrap();
        assert_eq!(load_text_pairs(&p).unwrap(), pairs);
    }
}
