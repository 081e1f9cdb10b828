//! CSV files: annotations, detections, per-slide scores, features,
//! projections and plot-ready curves.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use ihcq_core::annotations::{CellAnnotation, CellClass};
use ihcq_core::detect::Detection;
use ihcq_core::embed::{FeatureVector, ProjectedPoint};
use ihcq_core::quantify::{RaterPanel, Roc, SweepPoint};

use crate::error::{Error, Result};
use crate::fsutil;

/// Rows of a headed CSV, each with its 1-based line number.
struct Table {
    path: std::path::PathBuf,
    header: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(false)
            .from_reader(bytes.as_slice());
        let header = rdr
            .headers()
            .map_err(|e| Error::format(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::row(path, line, e)
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            rows.push((line, rec));
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    fn expect_header(&self, expected: &[&str]) -> Result<()> {
        if self.header != expected {
            return Err(Error::row(
                &self.path,
                1,
                format!("header must be `{}`, got `{}`", expected.join(","), self.header.join(",")),
            ));
        }
        Ok(())
    }

    fn parse<T: FromStr>(&self, line: u64, field: &str, what: &str) -> Result<T> {
        field
            .parse()
            .map_err(|_| Error::row(&self.path, line, format!("invalid {what} {field:?}")))
    }

    fn finite(&self, line: u64, field: &str, what: &str) -> Result<f64> {
        let v: f64 = self.parse(line, field, what)?;
        if !v.is_finite() {
            return Err(Error::row(&self.path, line, format!("{what} must be finite")));
        }
        Ok(v)
    }

    /// Non-negative real floored to a pixel index.
    fn pixel(&self, line: u64, field: &str, what: &str) -> Result<u32> {
        let v = self.finite(line, field, what)?;
        if v < 0.0 || v >= u32::MAX as f64 {
            return Err(Error::row(&self.path, line, format!("{what} {v} out of range")));
        }
        Ok(v.floor() as u32)
    }

    fn class(&self, line: u64, field: &str) -> Result<CellClass> {
        field
            .parse()
            .map_err(|e| Error::row(&self.path, line, e))
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::format(path, e);
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(&row).map_err(wrap)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e))?;
    fsutil::write_atomic(path, &bytes)
}

/// `x,y,class`; coordinates are non-negative reals floored to pixels.
pub fn read_annotations(path: &Path) -> Result<Vec<CellAnnotation>> {
    let t = Table::read(path)?;
    t.expect_header(&["x", "y", "class"])?;
    t.rows
        .iter()
        .map(|(line, r)| {
            Ok(CellAnnotation::new(
                t.pixel(*line, &r[0], "x")?,
                t.pixel(*line, &r[1], "y")?,
                t.class(*line, &r[2])?,
            ))
        })
        .collect()
}

pub fn write_annotations(path: &Path, anns: &[CellAnnotation]) -> Result<()> {
    write_rows(
        path,
        &["x", "y", "class"],
        anns.iter()
            .map(|a| vec![a.x.to_string(), a.y.to_string(), a.cls.to_string()]),
    )
}

/// `x,y,class,confidence` in global reference-MPP pixels.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let t = Table::read(path)?;
    t.expect_header(&["x", "y", "class", "confidence"])?;
    t.rows
        .iter()
        .map(|(line, r)| {
            let confidence: f32 = t.parse(*line, &r[3], "confidence")?;
            if !(0.0..=1.0).contains(&confidence) {
                return Err(Error::row(&t.path, *line, "confidence must lie in [0, 1]"));
            }
            Ok(Detection::new(
                t.pixel(*line, &r[0], "x")?,
                t.pixel(*line, &r[1], "y")?,
                t.class(*line, &r[2])?,
                confidence,
            ))
        })
        .collect()
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_rows(
        path,
        &["x", "y", "class", "confidence"],
        dets.iter().map(|d| {
            vec![
                d.x.to_string(),
                d.y.to_string(),
                d.cls.to_string(),
                d.confidence.to_string(),
            ]
        }),
    )
}

/// Per-slide scores, either `slide_id,tps` or three rater columns
/// `slide_id,r1,r2,r3`.
#[derive(Debug, Clone, PartialEq)]
pub enum SlideScores {
    Tps(Vec<(String, f64)>),
    Raters(Vec<RaterPanel>),
}

fn unique_ids<'a>(t: &Table, ids: impl Iterator<Item = (u64, &'a str)>) -> Result<()> {
    let mut seen = BTreeMap::new();
    for (line, id) in ids {
        if let Some(first) = seen.insert(id, line) {
            return Err(Error::row(
                &t.path,
                line,
                format!("slide_id {id:?} already listed on line {first}"),
            ));
        }
    }
    Ok(())
}

pub fn read_slide_scores(path: &Path) -> Result<SlideScores> {
    let t = Table::read(path)?;
    unique_ids(&t, t.rows.iter().map(|(l, r)| (*l, &r[0])))?;
    if t.header == ["slide_id", "tps"] {
        let rows = t
            .rows
            .iter()
            .map(|(line, r)| Ok((r[0].to_string(), t.finite(*line, &r[1], "tps")?)))
            .collect::<Result<_>>()?;
        Ok(SlideScores::Tps(rows))
    } else {
        t.expect_header(&["slide_id", "r1", "r2", "r3"])?;
        t.rows
            .iter()
            .map(|(line, r)| {
                let tps = [
                    t.finite(*line, &r[1], "r1")?,
                    t.finite(*line, &r[2], "r2")?,
                    t.finite(*line, &r[3], "r3")?,
                ];
                RaterPanel::new(&r[0], tps).map_err(|e| Error::row(&t.path, *line, e))
            })
            .collect::<Result<_>>()
            .map(SlideScores::Raters)
    }
}

pub fn read_tps_table(path: &Path) -> Result<Vec<(String, f64)>> {
    match read_slide_scores(path)? {
        SlideScores::Tps(rows) => Ok(rows),
        SlideScores::Raters(_) => Err(Error::row(path, 1, "expected header `slide_id,tps`")),
    }
}

/// `group,tps` rows collected per group (groups in name order).
pub fn read_groups(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let t = Table::read(path)?;
    t.expect_header(&["group", "tps"])?;
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (line, r) in &t.rows {
        groups
            .entry(r[0].to_string())
            .or_default()
            .push(t.finite(*line, &r[1], "tps")?);
    }
    Ok(groups)
}

/// One replicate score per row under a `score` header.
pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let t = Table::read(path)?;
    t.expect_header(&["score"])?;
    t.rows
        .iter()
        .map(|(line, r)| t.finite(*line, &r[0], "score"))
        .collect()
}

/// `patch_id,cohort_id,f0..f{D-1}`.
pub fn read_features(path: &Path) -> Result<Vec<FeatureVector>> {
    let t = Table::read(path)?;
    let d = t.header.len().saturating_sub(2);
    let expected: Vec<String> = ["patch_id".to_string(), "cohort_id".to_string()]
        .into_iter()
        .chain((0..d).map(|i| format!("f{i}")))
        .collect();
    if t.header != expected {
        return Err(Error::row(path, 1, "header must be `patch_id,cohort_id,f0,...`"));
    }
    t.rows
        .iter()
        .map(|(line, r)| {
            let values = (0..d)
                .map(|i| t.finite(*line, &r[i + 2], "feature"))
                .collect::<Result<_>>()?;
            Ok(FeatureVector {
                patch_id: r[0].to_string(),
                cohort_id: r[1].to_string(),
                values,
            })
        })
        .collect()
}

pub fn write_features(path: &Path, feats: &[FeatureVector]) -> Result<()> {
    let d = feats.first().map_or(0, |f| f.values.len());
    let names: Vec<String> = ["patch_id", "cohort_id"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..d).map(|i| format!("f{i}")))
        .collect();
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    write_rows(
        path,
        &header,
        feats.iter().map(|f| {
            [f.patch_id.clone(), f.cohort_id.clone()]
                .into_iter()
                .chain(f.values.iter().map(|v| v.to_string()))
                .collect()
        }),
    )
}

/// `patch_id,u,v`: the external projection hook.
pub fn read_projection(path: &Path) -> Result<Vec<ProjectedPoint>> {
    let t = Table::read(path)?;
    t.expect_header(&["patch_id", "u", "v"])?;
    t.rows
        .iter()
        .map(|(line, r)| {
            Ok(ProjectedPoint {
                patch_id: r[0].to_string(),
                u: t.finite(*line, &r[1], "u")?,
                v: t.finite(*line, &r[2], "v")?,
            })
        })
        .collect()
}

pub fn write_projection(path: &Path, points: &[ProjectedPoint]) -> Result<()> {
    write_rows(
        path,
        &["patch_id", "u", "v"],
        points
            .iter()
            .map(|p| vec![p.patch_id.clone(), p.u.to_string(), p.v.to_string()]),
    )
}

pub struct ScatterRow<'a> {
    pub point: &'a ProjectedPoint,
    pub tps: Option<f64>,
    pub cohort_id: &'a str,
}

/// `patch_id,u,v,tps,cohort_id`; `tps` is blank when unknown.
pub fn write_scatter(path: &Path, rows: &[ScatterRow]) -> Result<()> {
    write_rows(
        path,
        &["patch_id", "u", "v", "tps", "cohort_id"],
        rows.iter().map(|r| {
            vec![
                r.point.patch_id.clone(),
                r.point.u.to_string(),
                r.point.v.to_string(),
                r.tps.map(|t| t.to_string()).unwrap_or_default(),
                r.cohort_id.to_string(),
            ]
        }),
    )
}

/// `threshold,fpr,tpr`; the leading (0, 0) point has a blank threshold.
pub fn write_roc(path: &Path, roc: &Roc) -> Result<()> {
    write_rows(
        path,
        &["threshold", "fpr", "tpr"],
        roc.points.iter().map(|p| {
            vec![
                p.threshold.map(|t| t.to_string()).unwrap_or_default(),
                p.fpr.to_string(),
                p.tpr.to_string(),
            ]
        }),
    )
}

pub fn write_sweep(path: &Path, curve: &[SweepPoint]) -> Result<()> {
    write_rows(
        path,
        &["c2", "accuracy"],
        curve
            .iter()
            .map(|p| vec![p.c2.to_string(), p.accuracy.to_string()]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp(contents: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        std::fs::write(&p, contents).unwrap();
        (dir, p)
    }

    #[test]
    fn single_annotation_row() {
        let (_d, p) = tmp("x,y,class\n10,20,TC_POS\n");
        assert_eq!(
            read_annotations(&p).unwrap(),
            vec![CellAnnotation::new(10, 20, CellClass::TcPos)]
        );
    }

    #[test]
    fn header_only_is_empty() {
        let (_d, p) = tmp("x,y,class\n");
        assert!(read_annotations(&p).unwrap().is_empty());
    }

    #[test]
    fn reals_are_floored() {
        let (_d, p) = tmp("x,y,class\n10.9,0.2,TC_NEG\n");
        assert_eq!(
            read_annotations(&p).unwrap(),
            vec![CellAnnotation::new(10, 0, CellClass::TcNeg)]
        );
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        for (body, line) in [
            ("x,y,class\n1,2,TC_POS\n3,4,LYMPH\n", 3),
            ("x,y,class\n1,2,TC_POS\n-1,4,TC_NEG\n", 3),
            ("x,y,class\nabc,2,TC_POS\n", 2),
            ("x,y,class\n1,2,TC_POS\n1,2\n", 3),
            ("x,y\n1,2\n", 1),
        ] {
            let (_d, p) = tmp(body);
            match read_annotations(&p) {
                Err(Error::Row { line: l, .. }) => assert_eq!(l, line, "{body}"),
                other => panic!("{body}: {other:?}"),
            }
        }
    }

    #[test]
    fn thousand_annotations_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let anns: Vec<_> = (0..1000)
            .map(|_| {
                let cls = if rng.random() { CellClass::TcPos } else { CellClass::TcNeg };
                CellAnnotation::new(rng.random_range(0..100_000), rng.random_range(0..100_000), cls)
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_annotations(&p, &anns).unwrap();
        assert_eq!(read_annotations(&p).unwrap(), anns);
    }

    #[test]
    fn detections_round_trip_bit_exact() {
        let dets = vec![
            Detection::new(1, 2, CellClass::TcNeg, 0.1),
            Detection::new(3, 4, CellClass::TcPos, 0.987_654_3),
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_detections(&p, &dets).unwrap();
        assert_eq!(read_detections(&p).unwrap(), dets);
    }

    #[test]
    fn slide_scores_in_both_shapes() {
        let (_d, p) = tmp("slide_id,tps\na,1.5\nb,70\n");
        assert_eq!(
            read_slide_scores(&p).unwrap(),
            SlideScores::Tps(vec![("a".into(), 1.5), ("b".into(), 70.0)])
        );
        let (_d, p) = tmp("slide_id,r1,r2,r3\na,1,2,3\n");
        assert!(matches!(read_slide_scores(&p).unwrap(), SlideScores::Raters(v) if v.len() == 1));
        let (_d, p) = tmp("slide_id,tps\na,1\na,2\n");
        assert!(matches!(read_slide_scores(&p), Err(Error::Row { line: 3, .. })));
    }

    #[test]
    fn features_round_trip() {
        let feats = vec![
            FeatureVector {
                patch_id: "p0".into(),
                cohort_id: "c".into(),
                values: vec![0.1, 1.0 / 3.0],
            },
            FeatureVector {
                patch_id: "p1".into(),
                cohort_id: "d".into(),
                values: vec![2.0, -0.5],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        write_features(&p, &feats).unwrap();
        assert_eq!(read_features(&p).unwrap(), feats);
    }

    #[test]
    fn groups_collect_per_label() {
        let (_d, p) = tmp("group,tps\nA,1\nB,2\nA,3\n");
        let g = read_groups(&p).unwrap();
        assert_eq!(g["A"], vec![1.0, 3.0]);
        assert_eq!(g["B"], vec![2.0]);
    }
}
