//! JSON-lines dataset persistence. Line 1 is a header object; every
//! following line is either an untrimmed sample or an exemplar clip.
//! Floats are written in shortest round-trip decimal form, so
//! save -> load is exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episodes::{Annotation, Dataset, Exemplar, FeatureSequence, UntrimmedSample, EXEMPLAR_LEN};
use crate::error::{Error, Result};
use crate::geometry::Segment;

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    version: u32,
    num_classes: usize,
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "F")]
    f: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    prototypes: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    start: f64,
    end: f64,
    class: usize,
}

#[derive(Serialize, Deserialize)]
struct VideoLine {
    features: Vec<Vec<f64>>,
    annotations: Vec<AnnotationLine>,
}

#[derive(Serialize, Deserialize)]
struct ExemplarLine {
    exemplar: bool,
    class: usize,
    features: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BodyLine {
    Exemplar(ExemplarLine),
    Video(VideoLine),
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = HeaderLine {
        version: FORMAT_VERSION,
        num_classes: dataset.num_classes,
        l: dataset.seq_len,
        f: dataset.feat_dim,
        prototypes: dataset.prototypes.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).map_err(json_err)?)?;
    for video in &dataset.videos {
        let line = VideoLine {
            features: video.features.to_rows(),
            annotations: video
                .annotations
                .iter()
                .map(|a| AnnotationLine {
                    start: a.segment.start(),
                    end: a.segment.end(),
                    class: a.class_id,
                })
                .collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&line).map_err(json_err)?)?;
    }
    for ex in &dataset.exemplars {
        let line = ExemplarLine {
            exemplar: true,
            class: ex.class_id,
            features: ex.features.to_rows(),
        };
        writeln!(out, "{}", serde_json::to_string(&line).map_err(json_err)?)?;
    }
    out.flush()?;
    Ok(())
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Data(format!("json serialization failed: {e}"))
}

fn line_err(line_no: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("line {line_no}: {msg}"))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty dataset file", path.display())))?;
    let header: HeaderLine = serde_json::from_str(&first?)
        .map_err(|e| line_err(1, format!("invalid header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported dataset version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    if let Some(p) = &header.prototypes {
        if p.len() != header.num_classes || p.iter().any(|row| row.len() != header.f) {
            return Err(line_err(1, "prototype table does not match num_classes x F"));
        }
    }

    let mut videos = Vec::new();
    let mut exemplars = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let body: BodyLine = serde_json::from_str(&text)
            .map_err(|e| line_err(line_no, format!("malformed record: {e}")))?;
        match body {
            BodyLine::Exemplar(e) => {
                if e.class >= header.num_classes {
                    return Err(line_err(line_no, format!("class {} out of range", e.class)));
                }
                let features = parse_features(&e.features, EXEMPLAR_LEN, header.f, line_no)?;
                exemplars.push(Exemplar { features, class_id: e.class });
            }
            BodyLine::Video(v) => {
                let features = parse_features(&v.features, header.l, header.f, line_no)?;
                let mut annotations = Vec::with_capacity(v.annotations.len());
                for a in &v.annotations {
                    if a.class >= header.num_classes {
                        return Err(line_err(line_no, format!("class {} out of range", a.class)));
                    }
                    let segment = Segment::new(a.start, a.end)
                        .map_err(|e| line_err(line_no, e))?;
                    if segment.start() < 0.0 || segment.end() > header.l as f64 {
                        return Err(line_err(
                            line_no,
                            format!(
                                "segment [{}, {}) outside [0, {})",
                                segment.start(),
                                segment.end(),
                                header.l
                            ),
                        ));
                    }
                    annotations.push(Annotation { segment, class_id: a.class });
                }
                videos.push(UntrimmedSample { features, annotations });
            }
        }
    }

    Ok(Dataset {
        num_classes: header.num_classes,
        seq_len: header.l,
        feat_dim: header.f,
        prototypes: header.prototypes,
        videos,
        exemplars,
    })
}

fn parse_features(
    rows: &[Vec<f64>],
    expect_len: usize,
    expect_dim: usize,
    line_no: usize,
) -> Result<FeatureSequence> {
    if rows.len() != expect_len {
        return Err(line_err(
            line_no,
            format!("expected {expect_len} feature rows, got {}", rows.len()),
        ));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != expect_dim) {
        return Err(line_err(
            line_no,
            format!("feature row {bad} has width {}, expected {expect_dim}", rows[bad].len()),
        ));
    }
    FeatureSequence::from_rows(rows).map_err(|e| line_err(line_no, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{generate_dataset, GeneratorConfig};

    fn tiny() -> Dataset {
        let cfg = GeneratorConfig {
            num_classes: 10,
            num_videos: 3,
            seq_len: 64,
            feat_dim: 4,
            instance_len: (8, 20),
            exemplars_per_class: 2,
            ..GeneratorConfig::default()
        };
        generate_dataset(0, &cfg).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);

        // saving again produces identical bytes
        let path2 = dir.path().join("data2.jsonl");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let truncated = &lines[2][..40];
        lines[2] = truncated;
        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, lines.join("\n")).unwrap();
        let err = load_dataset(&bad).unwrap_err().to_string();
        assert!(err.contains("line 3"), "error should name line 3: {err}");
    }

    #[test]
    fn out_of_range_segment_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let header = r#"{"version":1,"num_classes":10,"L":16,"F":1}"#;
        let rows: Vec<String> = (0..16).map(|_| "[0.0]".to_string()).collect();
        let video = format!(
            r#"{{"features":[{}],"annotations":[{{"start":2.0,"end":20.0,"class":0}}]}}"#,
            rows.join(",")
        );
        std::fs::write(&path, format!("{header}\n{video}\n")).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("outside"), "{err}");
    }

    #[test]
    fn background_only_video_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bg.jsonl");
        let header = r#"{"version":1,"num_classes":10,"L":8,"F":1}"#;
        let rows: Vec<String> = (0..8).map(|_| "[0.5]".to_string()).collect();
        let video = format!(r#"{{"features":[{}],"annotations":[]}}"#, rows.join(","));
        std::fs::write(&path, format!("{header}\n{video}\n")).unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.videos.len(), 1);
        assert!(ds.videos[0].annotations.is_empty());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.jsonl");
        std::fs::write(&path, "{\"version\":9,\"num_classes\":10,\"L\":8,\"F\":1}\n").unwrap();
        assert!(load_dataset(&path).unwrap_err().to_string().contains("version"));
    }
}
