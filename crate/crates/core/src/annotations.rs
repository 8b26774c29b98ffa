//! Annotators, items, labels and their responses.
//!
//! Class labels are zero-based (`0..K`) in memory and one-based on disk. A
//! missing response is simply the absence of an entry; there is no sentinel
//! label value.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zero-based class index.
pub type Label = usize;

const STOCHASTIC_TOL: f64 = 1e-9;

/// Sparse `M x N` table of categorical responses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationMatrix {
    num_annotators: usize,
    num_items: usize,
    num_classes: usize,
    // (item, label), sorted by item
    by_annotator: Vec<Vec<(usize, Label)>>,
    // (annotator, label), sorted by annotator
    by_item: Vec<Vec<(usize, Label)>>,
}

impl AnnotationMatrix {
    /// Builds a matrix from zero-based `(annotator, item, label)` triplets.
    ///
    /// Rejects out-of-range indices, labels outside `0..K` and duplicate
    /// `(annotator, item)` pairs.
    pub fn from_triplets<I>(
        num_annotators: usize,
        num_items: usize,
        num_classes: usize,
        triplets: I,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, Label)>,
    {
        if num_classes < 1 {
            return Err(Error::Validation("number of classes must be positive".into()));
        }
        let mut by_annotator = vec![Vec::new(); num_annotators];
        let mut by_item = vec![Vec::new(); num_items];
        for (m, n, label) in triplets {
            if m >= num_annotators {
                return Err(Error::Validation(format!(
                    "annotator index {m} out of range (M = {num_annotators})"
                )));
            }
            if n >= num_items {
                return Err(Error::Validation(format!(
                    "item index {n} out of range (N = {num_items})"
                )));
            }
            if label >= num_classes {
                return Err(Error::Validation(format!(
                    "label {} out of range 1..={num_classes}",
                    label + 1
                )));
            }
            by_annotator[m].push((n, label));
            by_item[n].push((m, label));
        }
        for (m, row) in by_annotator.iter_mut().enumerate() {
            row.sort_unstable();
            if let Some(w) = row.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(Error::Validation(format!(
                    "duplicate response for annotator {} item {}",
                    m + 1,
                    w[0].0 + 1
                )));
            }
        }
        for col in by_item.iter_mut() {
            col.sort_unstable();
        }
        Ok(Self {
            num_annotators,
            num_items,
            num_classes,
            by_annotator,
            by_item,
        })
    }

    pub fn empty(num_annotators: usize, num_items: usize, num_classes: usize) -> Self {
        Self::from_triplets(num_annotators, num_items, num_classes, std::iter::empty())
            .expect("empty matrix is always valid")
    }

    pub fn num_annotators(&self) -> usize {
        self.num_annotators
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_responses(&self) -> usize {
        self.by_annotator.iter().map(Vec::len).sum()
    }

    /// Responses of annotator `m` as `(item, label)`, sorted by item.
    pub fn annotator_responses(&self, m: usize) -> &[(usize, Label)] {
        &self.by_annotator[m]
    }

    /// Responses for item `n` as `(annotator, label)`, sorted by annotator.
    pub fn item_responses(&self, n: usize) -> &[(usize, Label)] {
        &self.by_item[n]
    }

    pub fn get(&self, m: usize, n: usize) -> Option<Label> {
        let row = &self.by_annotator[m];
        row.binary_search_by_key(&n, |&(item, _)| item)
            .ok()
            .map(|i| row[i].1)
    }

    /// All responses as zero-based `(annotator, item, label)`, annotator-major.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, Label)> + '_ {
        self.by_annotator
            .iter()
            .enumerate()
            .flat_map(|(m, row)| row.iter().map(move |&(n, l)| (m, n, l)))
    }

    /// Keeps only the listed annotators, renumbered in the order given.
    pub fn select_annotators(&self, annotators: &[usize]) -> Self {
        let triplets = annotators.iter().enumerate().flat_map(|(new, &old)| {
            self.by_annotator[old].iter().map(move |&(n, l)| (new, n, l))
        });
        Self::from_triplets(annotators.len(), self.num_items, self.num_classes, triplets)
            .expect("subset of a valid matrix is valid")
    }

    /// Appends one annotator whose responses are `labels` (None = no response).
    pub fn with_extra_annotator(&self, labels: &[Option<Label>]) -> Result<Self> {
        if labels.len() != self.num_items {
            return Err(Error::Dimension(format!(
                "extra annotator has {} labels, expected {}",
                labels.len(),
                self.num_items
            )));
        }
        let extra = self.num_annotators;
        let triplets = self.triplets().chain(
            labels
                .iter()
                .enumerate()
                .filter_map(move |(n, l)| l.map(|l| (extra, n, l))),
        );
        Self::from_triplets(extra + 1, self.num_items, self.num_classes, triplets)
    }

    /// Replaces the rows of the given annotators with new `(annotator, item, label)` responses.
    pub fn replace_annotators<I>(&self, replaced: &BTreeSet<usize>, responses: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, Label)>,
    {
        let kept = self.triplets().filter(|(m, _, _)| !replaced.contains(m));
        let mut fresh: Vec<_> = responses.into_iter().collect();
        if let Some(&(m, _, _)) = fresh.iter().find(|(m, _, _)| !replaced.contains(m)) {
            return Err(Error::Validation(format!(
                "replacement response for annotator {} which is not being replaced",
                m + 1
            )));
        }
        fresh.extend(kept);
        Self::from_triplets(self.num_annotators, self.num_items, self.num_classes, fresh)
    }

    /// Writes the matrix as triplet CSV with a metadata comment line.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# annotators={},items={},classes={}",
            self.num_annotators, self.num_items, self.num_classes
        )?;
        writeln!(w, "item,annotator,label")?;
        let mut rows: Vec<_> = self.triplets().collect();
        rows.sort_unstable_by_key(|&(m, n, _)| (n, m));
        for (m, n, l) in rows {
            writeln!(w, "{},{},{}", n + 1, m + 1, l + 1)?;
        }
        Ok(())
    }

    pub fn save_triplets(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_triplets(std::io::BufWriter::new(f))
    }
}

/// On-disk layout of an annotation file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotationFormat {
    /// `item,annotator,label` rows, one-based, header optional.
    TripletCsv,
    /// One row per annotator, one column per item, `0` = missing.
    DenseCsv,
}

#[derive(Debug, Default)]
struct Header {
    annotators: Option<usize>,
    items: Option<usize>,
    classes: Option<usize>,
}

fn parse_header(line: &str) -> Header {
    let mut h = Header::default();
    for kv in line.trim_start_matches('#').split(',') {
        let mut parts = kv.splitn(2, '=');
        let (Some(k), Some(v)) = (parts.next(), parts.next()) else {
            continue;
        };
        let v = v.trim().parse().ok();
        match k.trim() {
            "annotators" => h.annotators = v,
            "items" => h.items = v,
            "classes" | "K" => h.classes = v,
            _ => {}
        }
    }
    h
}

fn parse_field(s: &str, line: u64, what: &str) -> Result<usize> {
    s.trim().parse::<usize>().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {what} {:?}", s.trim()),
    })
}

/// Loads an annotation file.
///
/// `num_classes` overrides the `classes=` header; when neither is present K is
/// the largest observed label. A label above K is an error.
pub fn load_annotations(
    path: impl AsRef<Path>,
    format: AnnotationFormat,
    num_classes: Option<usize>,
) -> Result<AnnotationMatrix> {
    let f = std::fs::File::open(path)?;
    read_annotations(f, format, num_classes)
}

pub fn read_annotations<R: Read>(
    reader: R,
    format: AnnotationFormat,
    num_classes: Option<usize>,
) -> Result<AnnotationMatrix> {
    let mut header = Header::default();
    let mut rows: Vec<(u64, String)> = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            if rows.is_empty() {
                header = parse_header(trimmed);
            }
            continue;
        }
        rows.push((i as u64 + 1, line));
    }

    // (annotator, item, label) one-based
    let mut raw: Vec<(u64, usize, usize, usize)> = Vec::new();
    let mut dense_width = None;
    let mut dense_row = 0usize;
    for (idx, (line_no, line)) in rows.iter().enumerate() {
        let mut record = csv::StringRecord::new();
        csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(line.as_bytes())
            .read_record(&mut record)
            .map_err(|e| Error::Parse {
                line: *line_no,
                msg: e.to_string(),
            })?;
        match format {
            AnnotationFormat::TripletCsv => {
                if idx == 0 && record.get(0).is_some_and(|f| f.parse::<usize>().is_err()) {
                    continue;
                }
                if record.len() != 3 {
                    return Err(Error::Parse {
                        line: *line_no,
                        msg: format!("expected 3 fields, found {}", record.len()),
                    });
                }
                let item = parse_field(&record[0], *line_no, "item")?;
                let annotator = parse_field(&record[1], *line_no, "annotator")?;
                let label = parse_field(&record[2], *line_no, "label")?;
                if item == 0 || annotator == 0 {
                    return Err(Error::Parse {
                        line: *line_no,
                        msg: "indices are one-based".into(),
                    });
                }
                if label == 0 {
                    return Err(Error::Validation(format!(
                        "line {line_no}: label 0 is not a valid class"
                    )));
                }
                raw.push((*line_no, annotator, item, label));
            }
            AnnotationFormat::DenseCsv => {
                let width = *dense_width.get_or_insert(record.len());
                if record.len() != width {
                    return Err(Error::Parse {
                        line: *line_no,
                        msg: format!("expected {width} fields, found {}", record.len()),
                    });
                }
                dense_row += 1;
                for (col, field) in record.iter().enumerate() {
                    let label = parse_field(field, *line_no, "label")?;
                    if label > 0 {
                        raw.push((*line_no, dense_row, col + 1, label));
                    }
                }
            }
        }
    }

    let max_label = raw.iter().map(|r| r.3).max().unwrap_or(0);
    let k = num_classes.or(header.classes).unwrap_or(max_label.max(2));
    if let Some(&(line, _, _, label)) = raw.iter().find(|r| r.3 > k) {
        return Err(Error::Validation(format!(
            "line {line}: label {label} exceeds number of classes {k}"
        )));
    }
    let max_m = raw.iter().map(|r| r.1).max().unwrap_or(0);
    let max_n = raw.iter().map(|r| r.2).max().unwrap_or(0);
    let m = header.annotators.unwrap_or(0).max(max_m).max(dense_row);
    let n = header.items.unwrap_or(0).max(max_n).max(dense_width.unwrap_or(0));
    AnnotationMatrix::from_triplets(m, n, k, raw.into_iter().map(|(_, a, i, l)| (a - 1, i - 1, l - 1)))
}

/// Removes annotators whose observed responses are all the same label.
///
/// Annotators with zero or one response count as constant. Returns the reduced
/// matrix and the removed (original, zero-based) annotator indices.
pub fn drop_constant_annotators(a: &AnnotationMatrix) -> (AnnotationMatrix, Vec<usize>) {
    let (kept, removed): (Vec<usize>, Vec<usize>) = (0..a.num_annotators()).partition(|&m| {
        let row = a.annotator_responses(m);
        row.iter().any(|&(_, l)| l != row[0].1)
    });
    (a.select_annotators(&kept), removed)
}

/// Column-stochastic `K x K` matrix; entry `(k, c)` is P(response k | true class c).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ConfusionMatrix(DMatrix<f64>);

impl ConfusionMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "confusion matrix must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Validation("confusion matrix entries must be non-negative".into()));
        }
        for (c, col) in m.column_iter().enumerate() {
            let s: f64 = col.sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Validation(format!(
                    "confusion matrix column {} sums to {s}",
                    c + 1
                )));
            }
        }
        Ok(Self(m))
    }

    /// Builds from rows, `rows[k][c]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension("confusion matrix rows must have length K".into()));
        }
        Self::new(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
    }

    pub fn identity(k: usize) -> Self {
        Self(DMatrix::identity(k, k))
    }

    pub fn num_classes(&self) -> usize {
        self.0.nrows()
    }

    /// P(response = `response` | truth = `truth`).
    pub fn prob(&self, response: Label, truth: Label) -> f64 {
        self.0[(response, truth)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Draws a response given the true class.
    pub fn sample<R: Rng + ?Sized>(&self, truth: Label, rng: &mut R) -> Label {
        sample_categorical(self.0.column(truth).iter().copied(), rng)
    }
}

impl TryFrom<Vec<Vec<f64>>> for ConfusionMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<ConfusionMatrix> for Vec<Vec<f64>> {
    fn from(h: ConfusionMatrix) -> Self {
        h.0.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

/// Class prior probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Priors(Vec<f64>);

impl Priors {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if pi.is_empty() {
            return Err(Error::Empty("priors".into()));
        }
        if pi.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Validation("priors must be non-negative".into()));
        }
        let s: f64 = pi.iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Validation(format!("priors sum to {s}")));
        }
        Ok(Self(pi))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Label {
        sample_categorical(self.0.iter().copied(), rng)
    }
}

impl TryFrom<Vec<f64>> for Priors {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Priors> for Vec<f64> {
    fn from(p: Priors) -> Self {
        p.0
    }
}

pub(crate) fn sample_categorical<R, I>(probs: I, rng: &mut R) -> Label
where
    R: Rng + ?Sized,
    I: IntoIterator<Item = f64>,
{
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.into_iter().enumerate() {
        acc += p;
        if p > 0.0 {
            last = i;
        }
        if u < acc {
            return i;
        }
    }
    last
}

/// Per-item labels; `None` marks an abstention (or unknown truth).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector(pub Vec<Option<Label>>);

impl LabelVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, n: usize) -> Option<Label> {
        self.0[n]
    }

    pub fn as_slice(&self) -> &[Option<Label>] {
        &self.0
    }

    pub fn num_abstained(&self) -> usize {
        self.0.iter().filter(|l| l.is_none()).count()
    }

    /// Fraction of items whose label matches `truth`. Abstentions count as
    /// wrong when `abstain_as_wrong`, otherwise they are excluded.
    pub fn accuracy(&self, truth: &LabelVector, abstain_as_wrong: bool) -> f64 {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (est, t) in self.0.iter().zip(&truth.0) {
            let Some(t) = t else { continue };
            match est {
                Some(e) => {
                    total += 1;
                    if e == t {
                        correct += 1;
                    }
                }
                None if abstain_as_wrong => total += 1,
                None => {}
            }
        }
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }

    /// Reads one-based labels, one per line as `item,label` or bare `label`.
    pub fn load(path: impl AsRef<Path>, num_items: usize) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut labels = vec![None; num_items];
        let mut next = 0usize;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            let line_no = i as u64 + 1;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = t.split(',').collect();
            let (item, label) = match fields.as_slice() {
                [label] => {
                    next += 1;
                    (next, *label)
                }
                [item, label] => {
                    if item.trim().parse::<usize>().is_err() && next == 0 {
                        continue;
                    }
                    (parse_field(item, line_no, "item")?, *label)
                }
                _ => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "expected `item,label` or `label`".into(),
                    })
                }
            };
            next = next.max(item);
            let label = parse_field(label, line_no, "label")?;
            if item == 0 || item > num_items {
                return Err(Error::Validation(format!("line {line_no}: item {item} out of range")));
            }
            labels[item - 1] = label.checked_sub(1);
        }
        Ok(Self(labels))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "item,label")?;
        for (n, l) in self.0.iter().enumerate() {
            writeln!(w, "{},{}", n + 1, l.map_or(0, |l| l + 1))?;
        }
        Ok(())
    }
}

/// Draws i.i.d. labels from `pi` and responses from each annotator's confusion
/// matrix; every (annotator, item) response exists independently with
/// probability `p_obs`.
pub fn simulate_honest_responses<R: Rng + ?Sized>(
    confusions: &[ConfusionMatrix],
    pi: &Priors,
    num_items: usize,
    p_obs: f64,
    rng: &mut R,
) -> Result<(AnnotationMatrix, LabelVector)> {
    let k = pi.num_classes();
    if let Some(h) = confusions.iter().find(|h| h.num_classes() != k) {
        return Err(Error::Dimension(format!(
            "confusion matrix has K = {}, priors have K = {k}",
            h.num_classes()
        )));
    }
    if !(0.0..=1.0).contains(&p_obs) {
        return Err(Error::Validation(format!("p_obs = {p_obs} not in [0, 1]")));
    }
    let truth: Vec<Label> = (0..num_items).map(|_| pi.sample(rng)).collect();
    let mut triplets = Vec::new();
    for (m, h) in confusions.iter().enumerate() {
        for (n, &y) in truth.iter().enumerate() {
            if rng.gen::<f64>() < p_obs {
                triplets.push((m, n, h.sample(y, rng)));
            }
        }
    }
    let a = AnnotationMatrix::from_triplets(confusions.len(), num_items, k, triplets)?;
    Ok((a, LabelVector(truth.into_iter().map(Some).collect())))
}
