//! Curation tooling: pairing instruction-edited records that share an
//! instruction into exemplar/test quadruples, exporting a manual review
//! queue, and ingesting the reviewed sheet into a versioned manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_ops::{load_image, prepare_image, save_png, sha256_hex, IMAGE_SIZE};
use crate::pipeline::{EditType, ExemplarTriplet};

pub const MANIFEST_VERSION: u32 = 1;

/// Per-type counts of the published curated dataset, kept as a schema
/// example for count tables.
pub const PUBLISHED_COUNTS: [(EditType, usize); 6] = [
    (EditType::GlobalStyle, 428),
    (EditType::Background, 212),
    (EditType::LocalizedStyle, 290),
    (EditType::ObjectReplacement, 366),
    (EditType::Motion, 14),
    (EditType::ObjectInsertion, 164),
];

/// One instruction-edited image pair from an upstream corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub source_id: String,
    pub image: PathBuf,
    pub edited_image: PathBuf,
    pub instruction: String,
}

impl SourceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.instruction.trim().is_empty() {
            return Err(Error::Validation(format!("record {}: empty instruction", self.source_id)));
        }
        for p in [&self.image, &self.edited_image] {
            if !p.exists() {
                return Err(Error::Validation(format!(
                    "record {}: {} does not exist",
                    self.source_id,
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

/// Reads records from a CSV with columns `source_id, image, edited_image,
/// instruction`. Relative paths are resolved against the CSV's directory.
pub fn load_records(csv_path: &Path) -> Result<Vec<SourceRecord>> {
    let base = csv_path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(csv_path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let mut r: SourceRecord = row?;
        r.image = resolve(base, &r.image);
        r.edited_image = resolve(base, &r.edited_image);
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

/// Lowercase with runs of whitespace collapsed to one space.
pub fn normalize_instruction(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Exemplar `(x, x_edit)` from one record, test `(y, y_edit)` from another
/// record with the same instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub instruction: String,
    pub exemplar: SourceRecord,
    pub test: SourceRecord,
}

impl Candidate {
    fn stable_id(instruction: &str, exemplar: &SourceRecord, test: &SourceRecord) -> String {
        let material = format!("{instruction}\u{1f}{}\u{1f}{}", exemplar.source_id, test.source_id);
        sha256_hex(material.as_bytes())[..16].to_owned()
    }
}

/// All ordered (exemplar, test) pairs of distinct records sharing a
/// normalized instruction. Groups come out in instruction order, pairs in
/// input order.
pub fn pair_by_instruction(records: &[SourceRecord]) -> Vec<Candidate> {
    let mut groups: BTreeMap<String, Vec<&SourceRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(normalize_instruction(&r.instruction)).or_default().push(r);
    }
    let mut out = Vec::new();
    for (instruction, group) in groups {
        for (i, e) in group.iter().enumerate() {
            for (j, t) in group.iter().enumerate() {
                if i != j {
                    out.push(Candidate {
                        id: Candidate::stable_id(&instruction, e, t),
                        instruction: instruction.clone(),
                        exemplar: (*e).clone(),
                        test: (*t).clone(),
                    });
                }
            }
        }
    }
    out
}

/// 2x2 sheet: `x | x_edit` over `y | y_edit`, each tile 512x512.
pub fn contact_sheet(x: &RgbImage, x_edit: &RgbImage, y: &RgbImage, y_edit: &RgbImage) -> RgbImage {
    let s = IMAGE_SIZE;
    let mut sheet = RgbImage::new(2 * s, 2 * s);
    for (img, col, row) in [(x, 0, 0), (x_edit, 1, 0), (y, 0, 1), (y_edit, 1, 1)] {
        let tile = prepare_image(img, s);
        imageops::replace(&mut sheet, &tile, (col * s) as i64, (row * s) as i64);
    }
    sheet
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRow {
    pub id: String,
    pub exemplar_src: String,
    pub test_src: String,
    pub decision: String,
    pub edit_type: String,
    pub notes: String,
}

pub const REVIEW_CSV: &str = "review.csv";
pub const CANDIDATES_JSON: &str = "candidates.json";

#[derive(Debug, Clone)]
pub struct ReviewExport {
    pub csv: PathBuf,
    pub candidates: PathBuf,
    pub sheets: Vec<PathBuf>,
}

/// Writes `sheets/{id}.png` per candidate, a `review.csv` with blank
/// decision columns and a `candidates.json` with the image paths that
/// ingestion needs. Output is a pure function of the candidates.
pub fn export_review_queue(candidates: &[Candidate], out_dir: &Path) -> Result<ReviewExport> {
    let sheet_dir = out_dir.join("sheets");
    std::fs::create_dir_all(&sheet_dir).map_err(|e| Error::io(&sheet_dir, e))?;
    let mut sheets = Vec::with_capacity(candidates.len());
    for c in candidates {
        let sheet = contact_sheet(
            &load_image(&c.exemplar.image)?,
            &load_image(&c.exemplar.edited_image)?,
            &load_image(&c.test.image)?,
            &load_image(&c.test.edited_image)?,
        );
        let path = sheet_dir.join(format!("{}.png", c.id));
        save_png(&sheet, &path)?;
        sheets.push(path);
    }

    let csv_path = out_dir.join(REVIEW_CSV);
    let mut writer = csv::Writer::from_path(&csv_path)?;
    if candidates.is_empty() {
        writer.write_record(["id", "exemplar_src", "test_src", "decision", "edit_type", "notes"])?;
    }
    for c in candidates {
        writer.serialize(ReviewRow {
            id: c.id.clone(),
            exemplar_src: c.exemplar.source_id.clone(),
            test_src: c.test.source_id.clone(),
            ..Default::default()
        })?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;

    let cand_path = out_dir.join(CANDIDATES_JSON);
    let text = serde_json::to_string_pretty(candidates)?;
    std::fs::write(&cand_path, text + "\n").map_err(|e| Error::io(&cand_path, e))?;
    Ok(ReviewExport {
        csv: csv_path,
        candidates: cand_path,
        sheets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Accepted,
    Rejected,
}

impl ReviewStatus {
    fn parse(decision: &str) -> Option<Self> {
        match decision.trim().to_lowercase().as_str() {
            "" | "pending" => Some(ReviewStatus::Pending),
            "accept" | "accepted" | "yes" | "y" => Some(ReviewStatus::Accepted),
            "reject" | "rejected" | "no" | "n" => Some(ReviewStatus::Rejected),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Image paths, relative to the manifest file when not absolute.
    pub x: PathBuf,
    pub x_edit: PathBuf,
    pub y: PathBuf,
    pub y_edit: PathBuf,
    pub edit_type: Option<EditType>,
    pub review_status: ReviewStatus,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub instruction: String,
}

impl ManifestEntry {
    pub fn paths(&self) -> [&Path; 4] {
        [&self.x, &self.x_edit, &self.y, &self.y_edit]
    }

    /// Loads the images as a triplet with ground truth.
    pub fn triplet(&self, base: &Path) -> Result<ExemplarTriplet> {
        let mut t = ExemplarTriplet::load(
            self.id.clone(),
            &resolve(base, &self.x),
            &resolve(base, &self.x_edit),
            &resolve(base, &self.y),
            Some(&resolve(base, &self.y_edit)),
        )?;
        t.edit_type = self.edit_type;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    /// Entries per edit type over all six types.
    pub counts: BTreeMap<EditType, usize>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        let mut m = Self {
            version: MANIFEST_VERSION,
            entries,
            counts: BTreeMap::new(),
        };
        m.recompute_counts();
        m
    }

    pub fn recompute_counts(&mut self) {
        self.counts = EditType::ALL.iter().map(|&t| (t, 0)).collect();
        for e in &self.entries {
            if let Some(t) = e.edit_type {
                *self.counts.entry(t).or_default() += 1;
            }
        }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Checks version, counts, taxonomy coverage and, for accepted entries,
    /// that every image path resolves against `base`.
    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        let mut expected = self.clone();
        expected.recompute_counts();
        if expected.counts != self.counts {
            return Err(Error::Validation("manifest counts do not match its entries".into()));
        }
        for e in &self.entries {
            if e.review_status != ReviewStatus::Accepted {
                continue;
            }
            if e.edit_type.is_none() {
                return Err(Error::Validation(format!("accepted entry {} has no edit type", e.id)));
            }
            for p in e.paths() {
                let full = resolve(base, p);
                if !full.exists() {
                    return Err(Error::Validation(format!("entry {}: {} does not exist", e.id, full.display())));
                }
            }
        }
        Ok(())
    }

    pub fn accepted(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.review_status == ReviewStatus::Accepted)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    /// 1-based data row number.
    pub row: usize,
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestReport {
    pub manifest: Manifest,
    pub accepted: usize,
    pub rejected: usize,
    pub pending: usize,
    pub errors: Vec<RowError>,
}

/// Turns accepted review rows into manifest entries. Image paths come from
/// the `candidates.json` written next to the CSV and are stored relative to
/// `manifest_dir` where possible. Rows with an unknown id, decision or edit
/// type are skipped and reported.
pub fn ingest_review(csv_path: &Path, manifest_dir: &Path) -> Result<IngestReport> {
    let dir = csv_path.parent().unwrap_or(Path::new("."));
    let cand_path = dir.join(CANDIDATES_JSON);
    let bytes = std::fs::read(&cand_path).map_err(|e| Error::io(&cand_path, e))?;
    let candidates: Vec<Candidate> = serde_json::from_slice(&bytes)?;
    let by_id: BTreeMap<&str, &Candidate> = candidates.iter().map(|c| (c.id.as_str(), c)).collect();

    // candidate paths are relative to the working directory or absolute
    let base = std::path::absolute(manifest_dir).map_err(|e| Error::io(manifest_dir, e))?;
    let mut reader = csv::Reader::from_path(csv_path)?;
    let mut entries = Vec::new();
    let (mut accepted, mut rejected, mut pending) = (0, 0, 0);
    let mut errors = Vec::new();
    for (i, row) in reader.deserialize::<ReviewRow>().enumerate() {
        let row_no = i + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                errors.push(RowError { row: row_no, id: String::new(), message: e.to_string() });
                continue;
            }
        };
        let fail = |message: String| RowError { row: row_no, id: row.id.clone(), message };
        let Some(status) = ReviewStatus::parse(&row.decision) else {
            errors.push(fail(format!("unknown decision {:?}", row.decision)));
            continue;
        };
        match status {
            ReviewStatus::Pending => {
                pending += 1;
                continue;
            }
            ReviewStatus::Rejected => {
                rejected += 1;
                continue;
            }
            ReviewStatus::Accepted => {}
        }
        let Some(c) = by_id.get(row.id.as_str()) else {
            errors.push(fail("id not found in candidates.json".into()));
            continue;
        };
        let edit_type = match row.edit_type.parse::<EditType>() {
            Ok(t) => t,
            Err(_) => {
                errors.push(fail(format!("unknown edit_type {:?}", row.edit_type)));
                continue;
            }
        };
        let rel = |p: &Path| {
            let p = std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
            p.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(p)
        };
        entries.push(ManifestEntry {
            id: c.id.clone(),
            x: rel(&c.exemplar.image),
            x_edit: rel(&c.exemplar.edited_image),
            y: rel(&c.test.image),
            y_edit: rel(&c.test.edited_image),
            edit_type: Some(edit_type),
            review_status: ReviewStatus::Accepted,
            instruction: c.instruction.clone(),
        });
        accepted += 1;
    }
    Ok(IngestReport {
        manifest: Manifest::new(entries),
        accepted,
        rejected,
        pending,
        errors,
    })
}
