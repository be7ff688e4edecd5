//! File formats: parameter JSON, emissions as CSV or nested-array JSON,
//! segmentations, marginals and versioned CSV reports.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::diagnostics::MarginalSet;
use crate::error::{Error, Result};
use crate::potentials::{EmissionBatch, Segment, Segmentation, SemiCrfParams};

/// First line of every CSV this crate writes.
pub const CSV_VERSION_LINE: &str = "# streamcrf-csv v1";

/// Parameter document: `{C, K, transition[C][C], duration_bias[K][C], pi_start?, pi_end?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub transition: Vec<Vec<f64>>,
    pub duration_bias: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi_start: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi_end: Option<Vec<f64>>,
}

fn matrix(rows: &[Vec<f64>], shape: (usize, usize), what: &str) -> Result<Array2<f64>> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(Error::Shape(format!("{what} must be {}x{}", shape.0, shape.1)));
    }
    Ok(Array2::from_shape_fn(shape, |(i, j)| rows[i][j]))
}

fn nested(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl ParamsFile {
    pub fn from_params(p: &SemiCrfParams) -> Self {
        Self {
            c: p.num_labels(),
            k: p.max_duration(),
            transition: nested(&p.transition),
            duration_bias: nested(&p.duration_bias),
            pi_start: p.pi_start.as_ref().map(|v| v.to_vec()),
            pi_end: p.pi_end.as_ref().map(|v| v.to_vec()),
        }
    }

    pub fn into_params(self) -> Result<SemiCrfParams> {
        let transition = matrix(&self.transition, (self.c, self.c), "transition")?;
        let duration_bias = matrix(&self.duration_bias, (self.k, self.c), "duration_bias")?;
        let mut params = SemiCrfParams::new(transition, duration_bias)?;
        let vector = |v: Option<Vec<f64>>, what: &str| -> Result<Option<Array1<f64>>> {
            match v {
                Some(v) if v.len() != self.c => Err(Error::Shape(format!("{what} must have {} entries", self.c))),
                v => Ok(v.map(Array1::from)),
            }
        };
        params.pi_start = vector(self.pi_start, "pi_start")?;
        params.pi_end = vector(self.pi_end, "pi_end")?;
        params.validate()?;
        Ok(params)
    }
}

pub fn read_params(path: &Path) -> Result<SemiCrfParams> {
    let file: ParamsFile = serde_json::from_reader(std::fs::File::open(path)?)?;
    file.into_params()
}

pub fn write_params(path: &Path, params: &SemiCrfParams) -> Result<()> {
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(f, &ParamsFile::from_params(params))?;
    Ok(())
}

/// Emissions JSON: a bare `[B][T][C]` array (all sequences full length) or
/// an object with explicit lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EmissionsFile {
    Nested(Vec<Vec<Vec<f64>>>),
    WithLengths {
        scores: Vec<Vec<Vec<f64>>>,
        lengths: Vec<usize>,
    },
}

impl EmissionsFile {
    pub fn from_batch(e: &EmissionBatch) -> Self {
        let (batch, _, _) = e.scores.dim();
        let scores = (0..batch)
            .map(|b| {
                (0..e.lengths[b])
                    .map(|t| e.scores.slice(ndarray::s![b, t, ..]).to_vec())
                    .collect()
            })
            .collect();
        Self::WithLengths {
            scores,
            lengths: e.lengths.clone(),
        }
    }

    pub fn into_batch(self) -> Result<EmissionBatch> {
        let (scores, lengths) = match self {
            Self::Nested(s) => {
                let l = s.iter().map(Vec::len).collect();
                (s, l)
            }
            Self::WithLengths { scores, lengths } => (scores, lengths),
        };
        if scores.is_empty() || lengths.len() != scores.len() {
            return Err(Error::Shape(
                "emissions need at least one sequence and one length per sequence".into(),
            ));
        }
        let t_max = scores.iter().map(Vec::len).max().unwrap_or(0);
        let c = scores.iter().flatten().map(Vec::len).next().unwrap_or(0);
        if scores.iter().flatten().any(|row| row.len() != c) {
            return Err(Error::Shape("every position needs the same number of labels".into()));
        }
        for (b, (seq, &len)) in scores.iter().zip(&lengths).enumerate() {
            if seq.len() < len {
                return Err(Error::InvalidLength {
                    b,
                    length: len,
                    max: seq.len(),
                });
            }
        }
        let mut out = Array3::<f64>::zeros((scores.len(), t_max, c));
        for (b, seq) in scores.iter().enumerate() {
            for (t, row) in seq.iter().enumerate() {
                for (l, &v) in row.iter().enumerate() {
                    out[[b, t, l]] = v;
                }
            }
        }
        EmissionBatch::new(out, lengths)
    }
}

/// Emissions CSV: one row per position, `b,t,c0..c{C-1}`. Lines starting
/// with `#` and a header row starting with `b` are skipped. Lengths are the
/// number of rows of each sequence, which must cover `t = 0..L_b`.
pub fn read_emissions_csv<R: Read>(reader: R) -> Result<EmissionBatch> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        if record.get(0).is_some_and(|f| f.eq_ignore_ascii_case("b")) {
            continue;
        }
        let parse_index = |i: usize| -> Result<usize> {
            record
                .get(i)
                .ok_or_else(|| Error::Parse(format!("row {line}: missing column {i}")))?
                .parse()
                .map_err(|e| Error::Parse(format!("row {line}: {e}")))
        };
        let (b, t) = (parse_index(0)?, parse_index(1)?);
        let values = record
            .iter()
            .skip(2)
            .map(|f| f.parse::<f64>().map_err(|e| Error::Parse(format!("row {line}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push((b, t, values));
    }
    if rows.is_empty() {
        return Err(Error::Parse("no emission rows".into()));
    }
    let c = rows[0].2.len();
    if c == 0 || rows.iter().any(|r| r.2.len() != c) {
        return Err(Error::Shape(
            "every row needs the same, nonzero number of label columns".into(),
        ));
    }
    let batch = rows.iter().map(|r| r.0).max().unwrap() + 1;
    let mut lengths = vec![0usize; batch];
    for r in &rows {
        lengths[r.0] = lengths[r.0].max(r.1 + 1);
    }
    let t_max = *lengths.iter().max().unwrap();
    let mut seen = Array2::<bool>::from_elem((batch, t_max), false);
    let mut scores = Array3::<f64>::zeros((batch, t_max, c));
    for (b, t, values) in rows {
        if std::mem::replace(&mut seen[[b, t]], true) {
            return Err(Error::Parse(format!("duplicate row for b={b}, t={t}")));
        }
        for (l, v) in values.into_iter().enumerate() {
            scores[[b, t, l]] = v;
        }
    }
    for (b, &len) in lengths.iter().enumerate() {
        if let Some(t) = (0..len).find(|&t| !seen[[b, t]]) {
            return Err(Error::Parse(format!("sequence {b} is missing position {t}")));
        }
    }
    EmissionBatch::new(scores, lengths)
}

pub fn write_emissions_csv<W: Write>(writer: W, e: &EmissionBatch) -> Result<()> {
    let mut w = versioned_csv(writer)?;
    let c = e.num_labels();
    let mut header = vec!["b".to_string(), "t".to_string()];
    header.extend((0..c).map(|l| format!("c{l}")));
    w.write_record(&header)?;
    for (b, &len) in e.lengths.iter().enumerate() {
        for t in 0..len {
            let mut row = vec![b.to_string(), t.to_string()];
            row.extend((0..c).map(|l| format!("{:?}", e.scores[[b, t, l]])));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads emissions by extension: `.csv` or JSON otherwise.
pub fn read_emissions(path: &Path) -> Result<EmissionBatch> {
    let f = std::fs::File::open(path)?;
    if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")) {
        read_emissions_csv(f)
    } else {
        let file: EmissionsFile = serde_json::from_reader(std::io::BufReader::new(f))?;
        file.into_batch()
    }
}

/// A CSV writer whose first line is [`CSV_VERSION_LINE`].
pub fn versioned_csv<W: Write>(mut writer: W) -> Result<csv::Writer<W>> {
    writeln!(writer, "{CSV_VERSION_LINE}")?;
    Ok(csv::Writer::from_writer(writer))
}

/// Serializes `rows` (with a header) after the version line.
pub fn write_csv_rows<W: Write, T: Serialize>(writer: W, rows: &[T]) -> Result<()> {
    let mut w = versioned_csv(writer)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_csv_rows`], checking the version line.
pub fn read_csv_rows<R: BufRead, T: for<'de> Deserialize<'de>>(mut reader: R) -> Result<Vec<T>> {
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != CSV_VERSION_LINE {
        return Err(Error::Parse(format!(
            "expected {CSV_VERSION_LINE:?}, found {:?}",
            first.trim_end()
        )));
    }
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedSequence {
    pub b: usize,
    pub score: f64,
    pub segments: Vec<Segment>,
}

pub fn decoded_sequences(paths: &[(Segmentation, f64)]) -> Vec<DecodedSequence> {
    paths
        .iter()
        .enumerate()
        .map(|(b, (seg, score))| DecodedSequence {
            b,
            score: *score,
            segments: seg.segments.clone(),
        })
        .collect()
}

/// Marginals as nested arrays trimmed to each sequence's length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalsFile {
    pub lengths: Vec<usize>,
    /// `[B][L_b][C]`
    pub position: Vec<Vec<Vec<f64>>>,
    /// `[B][L_b]`
    pub boundary: Vec<Vec<f64>>,
    pub expected_segments: Vec<f64>,
}

impl MarginalsFile {
    pub fn from_set(m: &MarginalSet) -> Self {
        let c = m.position.dim().2;
        Self {
            lengths: m.lengths.clone(),
            position: m
                .lengths
                .iter()
                .enumerate()
                .map(|(b, &len)| {
                    (0..len)
                        .map(|t| (0..c).map(|l| m.position[[b, t, l]]).collect())
                        .collect()
                })
                .collect(),
            boundary: m
                .lengths
                .iter()
                .enumerate()
                .map(|(b, &len)| (0..len).map(|t| m.boundary[[b, t]]).collect())
                .collect(),
            expected_segments: m.expected_segments.clone(),
        }
    }

    pub fn into_set(self) -> Result<MarginalSet> {
        let batch = self.lengths.len();
        let t_max = self.lengths.iter().copied().max().unwrap_or(0);
        let c = self.position.iter().flatten().map(Vec::len).next().unwrap_or(0);
        if self.position.len() != batch || self.boundary.len() != batch || self.expected_segments.len() != batch {
            return Err(Error::Shape("marginal arrays disagree on batch size".into()));
        }
        let mut position = Array3::<f64>::zeros((batch, t_max, c));
        let mut boundary = Array2::<f64>::zeros((batch, t_max));
        for b in 0..batch {
            let len = self.lengths[b];
            if self.position[b].len() != len || self.boundary[b].len() != len {
                return Err(Error::Shape(format!("sequence {b} marginals do not have length {len}")));
            }
            for t in 0..len {
                boundary[[b, t]] = self.boundary[b][t];
                if self.position[b][t].len() != c {
                    return Err(Error::Shape(format!(
                        "sequence {b} position {t} has the wrong label count"
                    )));
                }
                for l in 0..c {
                    position[[b, t, l]] = self.position[b][t][l];
                }
            }
        }
        Ok(MarginalSet {
            position,
            boundary,
            expected_segments: self.expected_segments,
            lengths: self.lengths,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), value)?;
    Ok(())
}
