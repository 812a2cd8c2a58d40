//! Line-delimited text records.
//!
//! Every file opens with `#schema:<type>:<version>`; each following line is
//! one object with tab-separated fields in a fixed order. Vectors are
//! comma-joined decimal literals, and `-` marks an absent optional field.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::types::{
    group_by_image, Assignment, BBox, CategoryEntry, CategoryTable, DetectionRecord,
    EmbeddingRecord, GroundTruthObject, ManifestEntry, SplitManifest,
};
use crate::error::{Error, Result};
use crate::numeric::{all_finite, argmax, softmax};

pub const TEXT_SCHEMA_VERSION: u32 = 1;

/// Maximum allowed gap between a record's confidence and its max softmax.
pub const CONFIDENCE_TOLERANCE: f64 = 1e-5;

const ABSENT: &str = "-";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextSchema {
    Detections,
    GroundTruth,
    Categories,
    Manifest,
    Embeddings,
    Scores,
    PooledLatent,
    Images,
    CategoryIds,
    Outcomes,
}

impl TextSchema {
    pub fn name(self) -> &'static str {
        match self {
            TextSchema::Detections => "detections",
            TextSchema::GroundTruth => "ground_truth",
            TextSchema::Categories => "categories",
            TextSchema::Manifest => "manifest",
            TextSchema::Embeddings => "embeddings",
            TextSchema::Scores => "scores",
            TextSchema::PooledLatent => "pooled_latent",
            TextSchema::Images => "images",
            TextSchema::CategoryIds => "category_ids",
            TextSchema::Outcomes => "outcomes",
        }
    }

    fn field_count(self) -> usize {
        match self {
            TextSchema::Detections => 8,
            TextSchema::GroundTruth => 5,
            TextSchema::Categories => 3,
            TextSchema::Manifest => 3,
            TextSchema::Embeddings => 3,
            TextSchema::Scores => 4,
            TextSchema::PooledLatent => 3,
            TextSchema::Images => 1,
            TextSchema::CategoryIds => 1,
            TextSchema::Outcomes => 6,
        }
    }

    pub fn header(self) -> String {
        format!("#schema:{}:{}", self.name(), TEXT_SCHEMA_VERSION)
    }
}

/// One scored detection in a score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub image_id: String,
    pub det_index: u32,
    pub method: String,
    pub value: f64,
}

/// A pre-pooled latent vector keyed by detection.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledLine {
    pub image_id: String,
    pub det_index: u32,
    pub vector: Vec<f64>,
}

struct LineCtx<'a> {
    label: &'a str,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.label.to_owned(),
            line: self.line,
            message: message.into(),
        }
    }

    fn real(&self, field: &str, what: &str) -> Result<f64> {
        field
            .parse::<f64>()
            .map_err(|_| self.err(format!("{what}: cannot parse {field:?} as a real")))
    }

    fn int<T: std::str::FromStr>(&self, field: &str, what: &str) -> Result<T> {
        field
            .parse::<T>()
            .map_err(|_| self.err(format!("{what}: cannot parse {field:?} as an integer")))
    }

    fn vector(&self, field: &str, what: &str) -> Result<Vec<f64>> {
        if field.is_empty() {
            return Err(self.err(format!("{what}: empty vector")));
        }
        field.split(',').map(|p| self.real(p, what)).collect()
    }

    fn opt_vector(&self, field: &str, what: &str) -> Result<Option<Vec<f64>>> {
        if field == ABSENT {
            Ok(None)
        } else {
            self.vector(field, what).map(Some)
        }
    }

    fn id_list(&self, field: &str, what: &str) -> Result<Vec<i64>> {
        if field == ABSENT {
            return Ok(Vec::new());
        }
        field.split(',').map(|p| self.int(p, what)).collect()
    }

    fn boolean(&self, field: &str, what: &str) -> Result<bool> {
        match field {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            other => Err(self.err(format!("{what}: cannot parse {other:?} as a boolean"))),
        }
    }

    fn non_empty<'s>(&self, field: &'s str, what: &str) -> Result<&'s str> {
        if field.is_empty() {
            Err(self.err(format!("{what} is empty")))
        } else {
            Ok(field)
        }
    }
}

/// Reads a schema-tagged file, calling `each` with the split fields of every
/// record line.
fn read_lines<R, F>(reader: R, label: &str, schema: TextSchema, mut each: F) -> Result<()>
where
    R: BufRead,
    F: FnMut(&LineCtx<'_>, &[&str]) -> Result<()>,
{
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => {
            return Err(Error::Parse {
                path: label.to_owned(),
                line: 1,
                message: format!("missing schema header {}", schema.header()),
            })
        }
    };
    check_header(header.trim_end_matches('\r'), label, schema)?;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let ctx = LineCtx { label, line: i + 2 };
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            return Err(ctx.err("blank line"));
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != schema.field_count() {
            return Err(ctx.err(format!(
                "expected {} tab-separated fields, found {}",
                schema.field_count(),
                fields.len()
            )));
        }
        each(&ctx, &fields)?;
    }
    Ok(())
}

fn check_header(header: &str, label: &str, schema: TextSchema) -> Result<()> {
    let err = |message: String| Error::Parse {
        path: label.to_owned(),
        line: 1,
        message,
    };
    let rest = header
        .strip_prefix("#schema:")
        .ok_or_else(|| err(format!("expected header {}, found {header:?}", schema.header())))?;
    let (name, version) = rest
        .rsplit_once(':')
        .ok_or_else(|| err(format!("malformed schema header {header:?}")))?;
    if name != schema.name() {
        return Err(err(format!(
            "schema type {name:?} does not match expected {:?}",
            schema.name()
        )));
    }
    let version: u32 = version
        .parse()
        .map_err(|_| err(format!("malformed schema version {version:?}")))?;
    if version != TEXT_SCHEMA_VERSION {
        return Err(err(format!(
            "unsupported {} schema version {version}",
            schema.name()
        )));
    }
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn label(path: &Path) -> String {
    path.display().to_string()
}

fn push_vec(out: &mut String, v: &[f64]) {
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{x}");
    }
}

fn push_opt_vec(out: &mut String, v: Option<&[f64]>) {
    match v {
        Some(v) => push_vec(out, v),
        None => out.push_str(ABSENT),
    }
}

fn push_ids(out: &mut String, ids: &[i64]) {
    if ids.is_empty() {
        out.push_str(ABSENT);
        return;
    }
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{id}");
    }
}

// ---------------------------------------------------------------------------
// Detections
// ---------------------------------------------------------------------------

pub fn load_detections(path: &Path, categories: &CategoryTable) -> Result<Vec<DetectionRecord>> {
    parse_detections(open(path)?, &label(path), categories)
}

pub fn parse_detections<R: BufRead>(
    reader: R,
    label: &str,
    categories: &CategoryTable,
) -> Result<Vec<DetectionRecord>> {
    let num_classes = categories.num_classes();
    let mut records = Vec::new();
    read_lines(reader, label, TextSchema::Detections, |ctx, f| {
        let bbox_vals = ctx.vector(f[2], "bbox")?;
        let bbox = BBox::from_slice(&bbox_vals)
            .ok_or_else(|| ctx.err(format!("bbox needs 4 reals, found {}", bbox_vals.len())))?;
        records.push(DetectionRecord {
            image_id: ctx.non_empty(f[0], "image_id")?.to_owned(),
            det_index: ctx.int(f[1], "det_index")?,
            bbox,
            pred_class: ctx.int(f[3], "pred_class")?,
            confidence: ctx.real(f[4], "confidence")?,
            logits: ctx.vector(f[5], "logits")?,
            features: ctx.opt_vector(f[6], "features")?,
            latent_pooled: ctx.opt_vector(f[7], "latent_pooled")?,
        });
        Ok(())
    })?;
    validate_detections(&records, num_classes)?;
    Ok(group_by_image(records, |r| r.image_id.as_str()))
}

/// Checks every record invariant; the first violation is reported with its
/// `(image_id, det_index)`.
pub fn validate_detections(records: &[DetectionRecord], num_classes: usize) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    let mut feature_dim: Option<usize> = None;
    let mut latent_dim: Option<usize> = None;
    for r in records {
        let who = r.key();
        if !seen.insert((r.image_id.as_str(), r.det_index)) {
            return Err(Error::Validation(format!("duplicate detection {who}")));
        }
        if !r.bbox.is_valid() {
            return Err(Error::Validation(format!(
                "detection {who}: degenerate box {:?}",
                r.bbox.to_array()
            )));
        }
        if r.logits.len() != num_classes {
            return Err(Error::Schema(format!(
                "detection {who}: {} logits but the category table has {num_classes} classes",
                r.logits.len()
            )));
        }
        if !all_finite(&r.logits) {
            return Err(Error::Validation(format!("detection {who}: non-finite logits")));
        }
        if r.pred_class >= num_classes || r.logits[r.pred_class] < r.logits[argmax(&r.logits).unwrap_or(0)] {
            return Err(Error::Validation(format!(
                "detection {who}: pred_class {} is not the argmax of the logits",
                r.pred_class
            )));
        }
        let max_prob = softmax(&r.logits).into_iter().fold(0.0, f64::max);
        if !(0.0..=1.0).contains(&r.confidence)
            || (r.confidence - max_prob).abs() > CONFIDENCE_TOLERANCE
        {
            return Err(Error::Validation(format!(
                "detection {who}: confidence {} differs from max softmax {max_prob}",
                r.confidence
            )));
        }
        for (vec, dim, what) in [
            (&r.features, &mut feature_dim, "features"),
            (&r.latent_pooled, &mut latent_dim, "latent_pooled"),
        ] {
            if let Some(v) = vec {
                if !all_finite(v) {
                    return Err(Error::Validation(format!("detection {who}: non-finite {what}")));
                }
                match *dim {
                    Some(d) if d != v.len() => {
                        return Err(Error::Schema(format!(
                            "detection {who}: {what} length {} differs from {d} seen earlier",
                            v.len()
                        )))
                    }
                    _ => *dim = Some(v.len()),
                }
            }
        }
    }
    Ok(())
}

pub fn write_detections<W: Write>(mut w: W, records: &[DetectionRecord]) -> Result<()> {
    writeln!(w, "{}", TextSchema::Detections.header())?;
    let mut line = String::new();
    for r in records {
        line.clear();
        let _ = write!(line, "{}\t{}\t", r.image_id, r.det_index);
        push_vec(&mut line, &r.bbox.to_array());
        let _ = write!(line, "\t{}\t{}\t", r.pred_class, r.confidence);
        push_vec(&mut line, &r.logits);
        line.push('\t');
        push_opt_vec(&mut line, r.features.as_deref());
        line.push('\t');
        push_opt_vec(&mut line, r.latent_pooled.as_deref());
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    write_detections(create(path)?, records)
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

pub fn load_ground_truth(path: &Path, categories: &CategoryTable) -> Result<Vec<GroundTruthObject>> {
    parse_ground_truth(open(path)?, &label(path), categories)
}

pub fn parse_ground_truth<R: BufRead>(
    reader: R,
    label: &str,
    categories: &CategoryTable,
) -> Result<Vec<GroundTruthObject>> {
    let mut objects = Vec::new();
    read_lines(reader, label, TextSchema::GroundTruth, |ctx, f| {
        let bbox_vals = ctx.vector(f[1], "bbox")?;
        let bbox = BBox::from_slice(&bbox_vals)
            .ok_or_else(|| ctx.err(format!("bbox needs 4 reals, found {}", bbox_vals.len())))?;
        let obj = GroundTruthObject {
            image_id: ctx.non_empty(f[0], "image_id")?.to_owned(),
            bbox,
            category_id: ctx.int(f[2], "category_id")?,
            is_unknown: ctx.boolean(f[3], "is_unknown")?,
            dataset_origin: f[4].to_owned(),
        };
        if !obj.bbox.is_valid() {
            return Err(Error::Validation(format!(
                "{label} line {}: ground truth in image {} has degenerate box {:?}",
                ctx.line,
                obj.image_id,
                obj.bbox.to_array()
            )));
        }
        if !categories.contains(obj.category_id) {
            return Err(Error::Validation(format!(
                "{label} line {}: ground truth in image {} has unknown category_id {}",
                ctx.line, obj.image_id, obj.category_id
            )));
        }
        objects.push(obj);
        Ok(())
    })?;
    Ok(group_by_image(objects, |o| o.image_id.as_str()))
}

pub fn write_ground_truth<W: Write>(mut w: W, objects: &[GroundTruthObject]) -> Result<()> {
    writeln!(w, "{}", TextSchema::GroundTruth.header())?;
    let mut line = String::new();
    for o in objects {
        line.clear();
        let _ = write!(line, "{}\t", o.image_id);
        push_vec(&mut line, &o.bbox.to_array());
        let _ = write!(
            line,
            "\t{}\t{}\t{}",
            o.category_id,
            u8::from(o.is_unknown),
            o.dataset_origin
        );
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_ground_truth(path: &Path, objects: &[GroundTruthObject]) -> Result<()> {
    write_ground_truth(create(path)?, objects)
}

// ---------------------------------------------------------------------------
// Categories
// ---------------------------------------------------------------------------

pub fn load_categories(path: &Path) -> Result<CategoryTable> {
    parse_categories(open(path)?, &label(path))
}

pub fn parse_categories<R: BufRead>(reader: R, label: &str) -> Result<CategoryTable> {
    let mut entries = Vec::new();
    read_lines(reader, label, TextSchema::Categories, |ctx, f| {
        entries.push(CategoryEntry {
            category_id: ctx.int(f[0], "category_id")?,
            name: f[1].to_owned(),
            role: f[2].parse().map_err(|e: String| ctx.err(e))?,
        });
        Ok(())
    })?;
    CategoryTable::new(entries)
}

pub fn write_categories<W: Write>(mut w: W, table: &CategoryTable) -> Result<()> {
    writeln!(w, "{}", TextSchema::Categories.header())?;
    for e in table.entries() {
        writeln!(w, "{}\t{}\t{}", e.category_id, e.name, e.role.as_str())?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Split manifests (also used for manual override files)
// ---------------------------------------------------------------------------

pub fn load_manifest(path: &Path) -> Result<SplitManifest> {
    parse_manifest(open(path)?, &label(path))
}

pub fn parse_manifest<R: BufRead>(reader: R, label: &str) -> Result<SplitManifest> {
    let mut entries = Vec::new();
    read_lines(reader, label, TextSchema::Manifest, |ctx, f| {
        entries.push(ManifestEntry {
            image_id: ctx.non_empty(f[0], "image_id")?.to_owned(),
            assignment: f[1].parse::<Assignment>().map_err(|e| ctx.err(e))?,
            evidence: ctx.id_list(f[2], "evidence")?,
        });
        Ok(())
    })?;
    let manifest = SplitManifest { entries };
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest<W: Write>(mut w: W, manifest: &SplitManifest) -> Result<()> {
    writeln!(w, "{}", TextSchema::Manifest.header())?;
    let mut line = String::new();
    for e in &manifest.entries {
        line.clear();
        let _ = write!(line, "{}\t{}\t", e.image_id, e.assignment.as_str());
        push_ids(&mut line, &e.evidence);
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_manifest(path: &Path, manifest: &SplitManifest) -> Result<()> {
    write_manifest(create(path)?, manifest)
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    parse_embeddings(open(path)?, &label(path))
}

pub fn parse_embeddings<R: BufRead>(reader: R, label: &str) -> Result<Vec<EmbeddingRecord>> {
    let mut out: Vec<EmbeddingRecord> = Vec::new();
    read_lines(reader, label, TextSchema::Embeddings, |ctx, f| {
        let embedding = ctx.vector(f[1], "embedding")?;
        if let Some(first) = out.first() {
            if first.embedding.len() != embedding.len() {
                return Err(Error::Schema(format!(
                    "{label} line {}: embedding dimension {} differs from {}",
                    ctx.line,
                    embedding.len(),
                    first.embedding.len()
                )));
            }
        }
        if !all_finite(&embedding) || embedding.iter().all(|&v| v == 0.0) {
            return Err(Error::Validation(format!(
                "{label} line {}: embedding must be finite with non-zero norm",
                ctx.line
            )));
        }
        out.push(EmbeddingRecord {
            image_id: ctx.non_empty(f[0], "image_id")?.to_owned(),
            embedding,
            split_tag: (f[2] != ABSENT).then(|| f[2].to_owned()),
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_embeddings<W: Write>(mut w: W, records: &[EmbeddingRecord]) -> Result<()> {
    writeln!(w, "{}", TextSchema::Embeddings.header())?;
    let mut line = String::new();
    for r in records {
        line.clear();
        let _ = write!(line, "{}\t", r.image_id);
        push_vec(&mut line, &r.embedding);
        let _ = write!(line, "\t{}", r.split_tag.as_deref().unwrap_or(ABSENT));
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Score files
// ---------------------------------------------------------------------------

pub fn load_scores(path: &Path) -> Result<Vec<ScoreLine>> {
    parse_scores(open(path)?, &label(path))
}

pub fn parse_scores<R: BufRead>(reader: R, label: &str) -> Result<Vec<ScoreLine>> {
    let mut out = Vec::new();
    read_lines(reader, label, TextSchema::Scores, |ctx, f| {
        let value = ctx.real(f[3], "value")?;
        if !value.is_finite() {
            return Err(ctx.err("score value must be finite"));
        }
        out.push(ScoreLine {
            image_id: ctx.non_empty(f[0], "image_id")?.to_owned(),
            det_index: ctx.int(f[1], "det_index")?,
            method: ctx.non_empty(f[2], "method")?.to_owned(),
            value,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_scores<W: Write>(mut w: W, scores: &[ScoreLine]) -> Result<()> {
    writeln!(w, "{}", TextSchema::Scores.header())?;
    for s in scores {
        writeln!(w, "{}\t{}\t{}\t{}", s.image_id, s.det_index, s.method, s.value)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_scores(path: &Path, scores: &[ScoreLine]) -> Result<()> {
    write_scores(create(path)?, scores)
}

// ---------------------------------------------------------------------------
// Pooled latent vectors
// ---------------------------------------------------------------------------

pub fn load_pooled(path: &Path) -> Result<Vec<PooledLine>> {
    parse_pooled(open(path)?, &label(path))
}

pub fn parse_pooled<R: BufRead>(reader: R, label: &str) -> Result<Vec<PooledLine>> {
    let mut out = Vec::new();
    read_lines(reader, label, TextSchema::PooledLatent, |ctx, f| {
        out.push(PooledLine {
            image_id: ctx.non_empty(f[0], "image_id")?.to_owned(),
            det_index: ctx.int(f[1], "det_index")?,
            vector: ctx.vector(f[2], "vector")?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_pooled<W: Write>(mut w: W, pooled: &[PooledLine]) -> Result<()> {
    writeln!(w, "{}", TextSchema::PooledLatent.header())?;
    let mut line = String::new();
    for p in pooled {
        line.clear();
        let _ = write!(line, "{}\t{}\t", p.image_id, p.det_index);
        push_vec(&mut line, &p.vector);
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Image lists and category id lists
// ---------------------------------------------------------------------------

pub fn load_image_list(path: &Path) -> Result<Vec<String>> {
    parse_image_list(open(path)?, &label(path))
}

pub fn parse_image_list<R: BufRead>(reader: R, label: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    read_lines(reader, label, TextSchema::Images, |ctx, f| {
        let id = ctx.non_empty(f[0], "image_id")?;
        if !seen.insert(id.to_owned()) {
            return Err(ctx.err(format!("duplicate image id {id}")));
        }
        out.push(id.to_owned());
        Ok(())
    })?;
    Ok(out)
}

pub fn write_image_list<W: Write>(mut w: W, ids: &[String]) -> Result<()> {
    writeln!(w, "{}", TextSchema::Images.header())?;
    for id in ids {
        writeln!(w, "{id}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_category_ids(path: &Path) -> Result<Vec<i64>> {
    parse_category_ids(open(path)?, &label(path))
}

pub fn parse_category_ids<R: BufRead>(reader: R, label: &str) -> Result<Vec<i64>> {
    let mut out = Vec::new();
    read_lines(reader, label, TextSchema::CategoryIds, |ctx, f| {
        out.push(ctx.int(f[0], "category_id")?);
        Ok(())
    })?;
    Ok(out)
}

pub fn write_category_ids<W: Write>(mut w: W, ids: &[i64]) -> Result<()> {
    writeln!(w, "{}", TextSchema::CategoryIds.header())?;
    for id in ids {
        writeln!(w, "{id}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_image_list(path: &Path, ids: &[String]) -> Result<()> {
    write_image_list(create(path)?, ids)
}

pub fn save_category_ids(path: &Path, ids: &[i64]) -> Result<()> {
    write_category_ids(create(path)?, ids)
}

pub fn save_pooled(path: &Path, pooled: &[PooledLine]) -> Result<()> {
    write_pooled(create(path)?, pooled)
}

pub fn save_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    write_embeddings(create(path)?, records)
}

pub fn save_categories(path: &Path, table: &CategoryTable) -> Result<()> {
    write_categories(create(path)?, table)
}

// ---------------------------------------------------------------------------
// Per-detection outcome dumps
// ---------------------------------------------------------------------------

/// One row of an outcome dump: how a detection was flagged and matched.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeLine {
    pub image_id: String,
    pub det_index: u32,
    pub verdict: String,
    pub outcome: String,
    pub matched_gt: Option<usize>,
    pub idness: f64,
}

pub fn write_outcomes<W: Write>(mut w: W, lines: &[OutcomeLine]) -> Result<()> {
    writeln!(w, "{}", TextSchema::Outcomes.header())?;
    for l in lines {
        let matched = l.matched_gt.map_or_else(|| ABSENT.to_owned(), |g| g.to_string());
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            l.image_id, l.det_index, l.verdict, l.outcome, matched, l.idness
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_outcomes(path: &Path, lines: &[OutcomeLine]) -> Result<()> {
    write_outcomes(create(path)?, lines)
}

pub fn parse_outcomes<R: BufRead>(reader: R, label: &str) -> Result<Vec<OutcomeLine>> {
    let mut out = Vec::new();
    read_lines(reader, label, TextSchema::Outcomes, |ctx, f| {
        out.push(OutcomeLine {
            image_id: ctx.non_empty(f[0], "image_id")?.to_owned(),
            det_index: ctx.int(f[1], "det_index")?,
            verdict: ctx.non_empty(f[2], "verdict")?.to_owned(),
            outcome: ctx.non_empty(f[3], "outcome")?.to_owned(),
            matched_gt: if f[4] == ABSENT {
                None
            } else {
                Some(ctx.int(f[4], "matched_gt")?)
            },
            idness: ctx.real(f[5], "idness")?,
        });
        Ok(())
    })?;
    Ok(out)
}
