use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use super::{Corpus, DataError, RESERVED_WORDS};
use crate::domain::{
    validate_scanpath, BBox, FeatureGrid, HumanScanpath, ImageSize, Pack, PackKind, Scanpath, TrialRecord,
    ValidationReport, Violation,
};

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct HeaderOut<'a> {
    schema_version: u32,
    category_vocab: &'a [String],
    word_vocab: &'a [String],
    grid_h: usize,
    grid_w: usize,
    feat_dim: usize,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    trial_id: &'a str,
    image_w: u32,
    image_h: u32,
    grid_h: usize,
    grid_w: usize,
    feat_dim: usize,
    features_b64: String,
    words: &'a [String],
    word_onsets_ms: &'a [u32],
    target_bbox: [f32; 4],
    target_category: &'a str,
    scanpaths: Vec<ScanpathOut<'a>>,
}

#[derive(Serialize)]
struct ScanpathOut<'a> {
    subject: &'a str,
    packs: Vec<PackOut>,
}

#[derive(Serialize)]
struct PackOut {
    j: usize,
    kind: &'static str,
    fix: Vec<(f32, f32, u32)>,
}

fn packs_out(s: &Scanpath) -> Vec<PackOut> {
    s.packs
        .iter()
        .map(|p| PackOut {
            j: p.word_index,
            kind: kind_code(p.kind),
            fix: p.fixations.iter().map(|f| (f.x, f.y, f.duration_ms)).collect(),
        })
        .collect()
}

fn kind_code(kind: PackKind) -> &'static str {
    match kind {
        PackKind::Normal => "N",
        PackKind::Null => "0",
        PackKind::Terminal => "T",
    }
}

fn encode_features(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut w: W) -> Result<(), DataError> {
    let header = HeaderOut {
        schema_version: CORPUS_SCHEMA_VERSION,
        category_vocab: &corpus.category_vocab,
        word_vocab: &corpus.word_vocab,
        grid_h: corpus.grid_shape.0,
        grid_w: corpus.grid_shape.1,
        feat_dim: corpus.feature_dim,
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for r in &corpus.records {
        let b = r.target_bbox;
        let out = RecordOut {
            trial_id: &r.trial_id,
            image_w: r.image.width,
            image_h: r.image.height,
            grid_h: r.features.rows,
            grid_w: r.features.cols,
            feat_dim: r.features.channels,
            features_b64: encode_features(&r.features.values),
            words: &r.words,
            word_onsets_ms: &r.word_onsets_ms,
            target_bbox: [b.x, b.y, b.w, b.h],
            target_category: &r.target_category,
            scanpaths: r
                .human_scanpaths
                .iter()
                .map(|h| ScanpathOut { subject: &h.subject, packs: packs_out(&h.scanpath) })
                .collect(),
        };
        serde_json::to_writer(&mut w, &out).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), DataError> {
    write_corpus(corpus, BufWriter::new(File::create(path)?))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, DataError> {
    read_corpus(BufReader::new(File::open(path)?))
}

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, name: &str, line: usize) -> Result<T, DataError> {
    let v = obj.get(name).ok_or_else(|| DataError::Schema {
        field: name.into(),
        line,
        message: "missing".into(),
    })?;
    T::deserialize(v).map_err(|e| DataError::Schema {
        field: name.into(),
        line,
        message: e.to_string(),
    })
}

fn schema(field: &str, line: usize, message: impl Into<String>) -> DataError {
    DataError::Schema { field: field.into(), line, message: message.into() }
}

fn parse_object(text: &str, line: usize) -> Result<Map<String, Value>, DataError> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(DataError::Parse { line, message: "expected a JSON object".into() }),
        Err(e) => Err(DataError::Parse { line, message: e.to_string() }),
    }
}

/// Reads a corpus and validates every record against the header
/// vocabularies and the scanpath invariants.
pub fn read_corpus<R: BufRead>(r: R) -> Result<Corpus, DataError> {
    let mut lines = r.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or(DataError::Parse { line: 1, message: "empty file".into() })?;
    let header = parse_object(&first?, 1)?;
    let version: u32 = field(&header, "schema_version", 1)?;
    if version != CORPUS_SCHEMA_VERSION {
        return Err(schema("schema_version", 1, format!("unsupported version {version}")));
    }
    let category_vocab: Vec<String> = field(&header, "category_vocab", 1)?;
    let word_vocab: Vec<String> = field(&header, "word_vocab", 1)?;
    if word_vocab.len() < 3 || word_vocab[..3] != RESERVED_WORDS {
        return Err(schema("word_vocab", 1, "must start with <bot>, <eot>, <pad>"));
    }
    let grid_shape = (field(&header, "grid_h", 1)?, field(&header, "grid_w", 1)?);
    let feature_dim: usize = field(&header, "feat_dim", 1)?;

    let mut corpus = Corpus {
        records: Vec::new(),
        category_vocab,
        word_vocab,
        grid_shape,
        feature_dim,
    };
    for (idx, text) in lines {
        let line = idx + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let obj = parse_object(&text, line)?;
        let record = parse_record(&obj, line, &corpus)?;
        let report = check_record(&record, &corpus);
        if !report.is_valid() {
            return Err(DataError::Validation {
                line,
                trial_id: record.trial_id,
                violations: report.to_string(),
            });
        }
        corpus.records.push(record);
    }
    Ok(corpus)
}

fn parse_record(obj: &Map<String, Value>, line: usize, corpus: &Corpus) -> Result<TrialRecord, DataError> {
    let trial_id: String = field(obj, "trial_id", line)?;
    let image = ImageSize { width: field(obj, "image_w", line)?, height: field(obj, "image_h", line)? };
    let rows: usize = field(obj, "grid_h", line)?;
    let cols: usize = field(obj, "grid_w", line)?;
    let channels: usize = field(obj, "feat_dim", line)?;
    if (rows, cols) != corpus.grid_shape {
        return Err(schema("grid_h", line, "grid shape differs from the header"));
    }
    if channels != corpus.feature_dim {
        return Err(schema("feat_dim", line, "feature dim differs from the header"));
    }
    let encoded: String = field(obj, "features_b64", line)?;
    let bytes = B64
        .decode(encoded.as_bytes())
        .map_err(|e| schema("features_b64", line, e.to_string()))?;
    if bytes.len() != rows * cols * channels * 4 {
        return Err(schema(
            "features_b64",
            line,
            format!("{} bytes for a {channels}×{rows}×{cols} grid", bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let words: Vec<String> = field(obj, "words", line)?;
    let word_onsets_ms: Vec<u32> = field(obj, "word_onsets_ms", line)?;
    let [x, y, w, h]: [f32; 4] = field(obj, "target_bbox", line)?;
    let target_category: String = field(obj, "target_category", line)?;

    let raw: Vec<Value> = field(obj, "scanpaths", line)?;
    let mut human_scanpaths = Vec::with_capacity(raw.len());
    for sp in &raw {
        let sp = sp.as_object().ok_or_else(|| schema("scanpaths", line, "expected objects"))?;
        let subject: String = field(sp, "subject", line)?;
        let scanpath = parse_packs(sp, line, words.len())?;
        human_scanpaths.push(HumanScanpath { subject, scanpath });
    }

    Ok(TrialRecord {
        trial_id,
        image,
        features: FeatureGrid { channels, rows, cols, values },
        words,
        word_onsets_ms,
        target_bbox: BBox { x, y, w, h },
        target_category,
        human_scanpaths,
    })
}

fn parse_packs(obj: &Map<String, Value>, line: usize, n_words: usize) -> Result<Scanpath, DataError> {
    let packs_raw: Vec<Value> = field(obj, "packs", line)?;
    let mut packs = Vec::with_capacity(packs_raw.len());
    for p in &packs_raw {
        let p = p.as_object().ok_or_else(|| schema("packs", line, "expected objects"))?;
        let j: usize = field(p, "j", line)?;
        let kind: String = field(p, "kind", line)?;
        let fix: Vec<(f32, f32, u32)> = field(p, "fix", line)?;
        let kind = match kind.as_str() {
            "N" => PackKind::Normal,
            "0" => PackKind::Null,
            "T" => PackKind::Terminal,
            other => return Err(schema("kind", line, format!("unknown pack kind `{other}`"))),
        };
        // Fixations are kept whatever the kind so validation can flag them.
        packs.push(Pack { kind, word_index: j, fixations: Pack::normal(j, &fix).fixations });
    }
    Ok(Scanpath::from_packs(packs, n_words))
}

/// A generated scanpath for one record.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanpathEntry {
    pub trial_id: String,
    pub source: String,
    pub sample: usize,
    pub scanpath: Scanpath,
}

#[derive(Serialize)]
struct EntryOut<'a> {
    trial_id: &'a str,
    source: &'a str,
    sample: usize,
    packs: Vec<PackOut>,
}

/// One JSON object per line: `trial_id`, `source`, `sample` and `packs` in
/// the corpus pack format.
pub fn write_scanpaths<W: Write>(entries: &[ScanpathEntry], mut w: W) -> Result<(), DataError> {
    for e in entries {
        let out = EntryOut { trial_id: &e.trial_id, source: &e.source, sample: e.sample, packs: packs_out(&e.scanpath) };
        serde_json::to_writer(&mut w, &out).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads scanpaths written by [`write_scanpaths`], validating each against
/// its record in `corpus`.
pub fn read_scanpaths<R: BufRead>(r: R, corpus: &Corpus) -> Result<Vec<ScanpathEntry>, DataError> {
    let mut out = Vec::new();
    for (idx, text) in r.lines().enumerate() {
        let line = idx + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let obj = parse_object(&text, line)?;
        let trial_id: String = field(&obj, "trial_id", line)?;
        let record = corpus
            .records
            .iter()
            .find(|r| r.trial_id == trial_id)
            .ok_or_else(|| schema("trial_id", line, format!("no record `{trial_id}` in the corpus")))?;
        let scanpath = parse_packs(&obj, line, record.n_words())?;
        let report = validate_scanpath(&scanpath, record);
        if !report.is_valid() {
            return Err(DataError::Validation { line, trial_id, violations: report.to_string() });
        }
        out.push(ScanpathEntry {
            trial_id,
            source: field(&obj, "source", line)?,
            sample: field(&obj, "sample", line)?,
            scanpath,
        });
    }
    Ok(out)
}

fn check_record(record: &TrialRecord, corpus: &Corpus) -> ValidationReport {
    let mut report = record.validate();
    for w in &record.words {
        if corpus.word_index(w).is_none_or(|i| i < RESERVED_WORDS.len()) {
            report.push(Violation::UnknownWord { word: w.clone() });
        }
    }
    if corpus.category_index(&record.target_category).is_none() {
        report.push(Violation::UnknownCategory { category: record.target_category.clone() });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_corpus, SynthConfig};

    fn small() -> Corpus {
        synthesize_corpus(&SynthConfig { n_records: 6, ..SynthConfig::default() }).unwrap()
    }

    fn lines(c: &Corpus) -> Vec<String> {
        let mut buf = Vec::new();
        write_corpus(c, &mut buf).unwrap();
        String::from_utf8(buf).unwrap().lines().map(String::from).collect()
    }

    #[test]
    fn scanpath_file_round_trip() {
        let c = small();
        let entries: Vec<ScanpathEntry> = c
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| ScanpathEntry {
                trial_id: r.trial_id.clone(),
                source: "gt".into(),
                sample: i,
                scanpath: r.human_scanpaths[0].scanpath.clone(),
            })
            .collect();
        let mut buf = Vec::new();
        write_scanpaths(&entries, &mut buf).unwrap();
        assert_eq!(read_scanpaths(buf.as_slice(), &c).unwrap(), entries);
        let bad = String::from_utf8(buf).unwrap().replacen(&c.records[0].trial_id, "nope", 1);
        assert!(matches!(read_scanpaths(bad.as_bytes(), &c), Err(DataError::Schema { line: 1, .. })));
    }

    #[test]
    fn round_trip_is_identity() {
        let c = small();
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf).unwrap();
        let back = read_corpus(buf.as_slice()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn missing_bbox_names_field_and_line() {
        let c = small();
        let mut ls = lines(&c);
        let mut obj: Map<String, Value> = serde_json::from_str(&ls[2]).unwrap();
        obj.remove("target_bbox");
        ls[2] = serde_json::to_string(&obj).unwrap();
        let err = read_corpus(ls.join("\n").as_bytes()).unwrap_err();
        match err {
            DataError::Schema { field, line, .. } => {
                assert_eq!(field, "target_bbox");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_fixation_fails_validation() {
        let c = small();
        let mut ls = lines(&c);
        let mut obj: Value = serde_json::from_str(&ls[1]).unwrap();
        let packs = obj["scanpaths"][0]["packs"].as_array_mut().unwrap();
        let normal = packs.iter_mut().find(|p| p["kind"] == "N").unwrap();
        normal["fix"][0][2] = Value::from(40);
        ls[1] = obj.to_string();
        let err = read_corpus(ls.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Validation { line: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_json_reports_line() {
        let c = small();
        let mut ls = lines(&c);
        ls[4].truncate(10);
        let err = read_corpus(ls.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 5, .. }));
    }
}
