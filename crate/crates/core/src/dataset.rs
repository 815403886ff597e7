//! On-disk datasets: a JSON manifest next to 8-bit binary PGM images referenced by relative
//! path. Label writes go through [`Dataset::submit_labels`], which checks the per-group
//! revision, validates every rect, and rewrites the manifest atomically.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::glyphkit::{
    CandidateGroup, CanvasImage, Condition, GroupSource, Rect, RegionAnnotation, TextBlock,
    CHARSET_VERSION,
};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// What a condition is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Stage1,
    Stage2,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEntry {
    pub id: String,
    pub prompt_id: usize,
    pub blocks: Vec<TextBlock>,
    pub split: Split,
    /// Training target for stage-1 conditions. It may contain deliberate glyph errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

impl ConditionEntry {
    pub fn condition(&self) -> Condition {
        Condition {
            prompt_id: self.prompt_id,
            blocks: self.blocks.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub id: String,
    pub condition_id: String,
    pub source: GroupSource,
    pub images: Vec<String>,
    /// Per image, one annotation per block in block order.
    pub annotations: Vec<Vec<RegionAnnotation>>,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub timestamp: String,
    pub actor: String,
    pub group_id: String,
    pub revision: u64,
    /// False when the submission matched the stored labels.
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub charset_version: String,
    pub width: usize,
    pub height: usize,
    pub conditions: Vec<ConditionEntry>,
    pub groups: Vec<GroupEntry>,
    pub audit_log: Vec<AuditEntry>,
}

impl Manifest {
    pub fn new(width: usize, height: usize) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            charset_version: CHARSET_VERSION.into(),
            width,
            height,
            conditions: Vec::new(),
            groups: Vec::new(),
            audit_log: Vec::new(),
        }
    }

    pub fn condition(&self, id: &str) -> Option<&ConditionEntry> {
        self.conditions.iter().find(|c| c.id == id)
    }

    pub fn group(&self, id: &str) -> Option<&GroupEntry> {
        self.groups.iter().find(|g| g.id == id)
    }

    pub fn conditions_in(&self, split: Split) -> impl Iterator<Item = &ConditionEntry> {
        self.conditions.iter().filter(move |c| c.split == split)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    /// The manifest without its audit log, for comparisons that ignore label history.
    pub fn without_audit(&self) -> Manifest {
        Manifest {
            audit_log: Vec::new(),
            ..self.clone()
        }
    }
}

/// 8-bit binary PGM; values are clamped to [0, 1] and stored as `round(255 * v)`.
pub fn encode_pgm(img: &CanvasImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<CanvasImage> {
    let bad = |detail: &str| Error::Format {
        what: "PGM",
        detail: detail.into(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("expected P5 magic"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1;
    let data = bytes
        .get(pos..)
        .filter(|d| d.len() == w * h)
        .ok_or_else(|| bad("pixel data length"))?;
    CanvasImage::from_vec(w, h, data.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Per-rect diagnostics for a rejected label submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDiagnostic {
    pub image: usize,
    pub block_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rect: Option<Rect>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelError {
    UnknownGroup(String),
    Conflict { current: u64 },
    Invalid(Vec<LabelDiagnostic>),
}

/// Checks a submission against the group's condition and returns it in stored form: per
/// image, one annotation per block in block order, with blocks the client omitted left clean.
pub fn canonical_labels(
    condition: &Condition,
    images: usize,
    submitted: &[Vec<RegionAnnotation>],
) -> std::result::Result<Vec<Vec<RegionAnnotation>>, Vec<LabelDiagnostic>> {
    let mut diags = Vec::new();
    if submitted.len() != images {
        diags.push(LabelDiagnostic {
            image: submitted.len().min(images),
            block_index: 0,
            rect: None,
            reason: format!(
                "expected annotations for {images} images, got {}",
                submitted.len()
            ),
        });
        return Err(diags);
    }
    let mut out = Vec::with_capacity(images);
    for (i, anns) in submitted.iter().enumerate() {
        let mut per_block: Vec<RegionAnnotation> = (0..condition.blocks.len())
            .map(RegionAnnotation::clean)
            .collect();
        let mut seen = HashSet::new();
        for ann in anns {
            let Some(block) = condition.blocks.get(ann.block_index) else {
                diags.push(LabelDiagnostic {
                    image: i,
                    block_index: ann.block_index,
                    rect: None,
                    reason: format!("condition has {} blocks", condition.blocks.len()),
                });
                continue;
            };
            if !seen.insert(ann.block_index) {
                diags.push(LabelDiagnostic {
                    image: i,
                    block_index: ann.block_index,
                    rect: None,
                    reason: "block annotated twice".into(),
                });
                continue;
            }
            for rect in &ann.incorrect_rects {
                let reason = if rect.area() == 0 {
                    "zero-area rect"
                } else if !block.bbox.contains_rect(rect) {
                    "rect lies outside its block"
                } else {
                    continue;
                };
                diags.push(LabelDiagnostic {
                    image: i,
                    block_index: ann.block_index,
                    rect: Some(*rect),
                    reason: reason.into(),
                });
            }
            per_block[ann.block_index] = ann.clone();
        }
        out.push(per_block);
    }
    if diags.is_empty() {
        Ok(out)
    } else {
        Err(diags)
    }
}

/// A manifest loaded from its root directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn create(root: impl Into<PathBuf>, width: usize, height: usize) -> Self {
        Dataset {
            root: root.into(),
            manifest: Manifest::new(width, height),
        }
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format {
                what: "manifest",
                detail: format!("unsupported version {}", manifest.version),
            });
        }
        Ok(Dataset { root, manifest })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn save(&self) -> Result<()> {
        write_atomic(&self.manifest_path(), &self.manifest.to_json()?)
    }

    /// Resolves a manifest-relative path, refusing absolute paths and `..` components.
    pub fn resolve(&self, rel: &str) -> Result<PathBuf> {
        let p = Path::new(rel);
        let ok = !rel.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
        if !ok {
            return Err(Error::Format {
                what: "image path",
                detail: format!("{rel:?} is not a plain relative path"),
            });
        }
        Ok(self.root.join(p))
    }

    pub fn read_image(&self, rel: &str) -> Result<CanvasImage> {
        let path = self.resolve(rel)?;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        decode_pgm(&bytes)
    }

    pub fn write_image(&self, rel: &str, img: &CanvasImage) -> Result<()> {
        write_atomic(&self.resolve(rel)?, &encode_pgm(img))
    }

    pub fn load_group(&self, id: &str) -> Result<CandidateGroup> {
        let g = self
            .manifest
            .group(id)
            .ok_or_else(|| Error::Config(format!("unknown group {id:?}")))?;
        let c = self.manifest.condition(&g.condition_id).ok_or_else(|| {
            Error::Config(format!(
                "group {id} references missing condition {}",
                g.condition_id
            ))
        })?;
        let images = g
            .images
            .iter()
            .map(|p| self.read_image(p))
            .collect::<Result<Vec<_>>>()?;
        CandidateGroup::new(c.condition(), images, g.annotations.clone(), g.source)
    }

    /// Applies a label submission made against `revision` and persists the manifest.
    /// Unchanged labels keep the revision; the audit log records every accepted call.
    pub fn submit_labels(
        &mut self,
        group_id: &str,
        revision: u64,
        annotations: &[Vec<RegionAnnotation>],
        actor: &str,
        timestamp: &str,
    ) -> Result<std::result::Result<u64, LabelError>> {
        let Some(gi) = self.manifest.groups.iter().position(|g| g.id == group_id) else {
            return Ok(Err(LabelError::UnknownGroup(group_id.into())));
        };
        let group = &self.manifest.groups[gi];
        if group.revision != revision {
            return Ok(Err(LabelError::Conflict {
                current: group.revision,
            }));
        }
        let Some(cond) = self.manifest.condition(&group.condition_id) else {
            return Err(Error::Config(format!(
                "group {group_id} references a missing condition"
            )));
        };
        let labels = match canonical_labels(&cond.condition(), group.images.len(), annotations) {
            Ok(l) => l,
            Err(d) => return Ok(Err(LabelError::Invalid(d))),
        };
        let changed = labels != group.annotations;
        let mut next = self.manifest.clone();
        let g = &mut next.groups[gi];
        if changed {
            g.annotations = labels;
            g.revision += 1;
        }
        let new_revision = g.revision;
        next.audit_log.push(AuditEntry {
            timestamp: timestamp.into(),
            actor: actor.into(),
            group_id: group_id.into(),
            revision: new_revision,
            changed,
        });
        write_atomic(&self.manifest_path(), &next.to_json()?)?;
        self.manifest = next;
        Ok(Ok(new_revision))
    }

    /// Referential and structural checks; returns every problem found.
    pub fn verify(&self) -> Vec<String> {
        let m = &self.manifest;
        let mut problems = Vec::new();
        if m.charset_version != CHARSET_VERSION {
            problems.push(format!(
                "charset version {} differs from {CHARSET_VERSION}",
                m.charset_version
            ));
        }
        let image_ok = |rel: &str, owner: &str, problems: &mut Vec<String>| match self
            .read_image(rel)
        {
            Ok(img) if (img.width, img.height) != (m.width, m.height) => problems.push(format!(
                "{owner}: image {rel} is {}x{}, expected {}x{}",
                img.width, img.height, m.width, m.height
            )),
            Ok(_) => {}
            Err(e) => problems.push(format!("{owner}: {e}")),
        };
        let mut cond_ids = BTreeMap::new();
        for c in &m.conditions {
            if cond_ids.insert(c.id.as_str(), c).is_some() {
                problems.push(format!("duplicate condition id {}", c.id));
            }
            if let Err(e) = c.condition().validate(m.width, m.height) {
                problems.push(format!("condition {}: {e}", c.id));
            }
            if let Some(rel) = &c.image {
                image_ok(rel, &format!("condition {}", c.id), &mut problems);
            }
        }
        let mut group_ids = HashSet::new();
        for g in &m.groups {
            if !group_ids.insert(g.id.as_str()) {
                problems.push(format!("duplicate group id {}", g.id));
            }
            let Some(c) = cond_ids.get(g.condition_id.as_str()) else {
                problems.push(format!(
                    "group {}: missing condition {}",
                    g.id, g.condition_id
                ));
                continue;
            };
            if g.images.len() < 2 {
                problems.push(format!("group {}: {} images", g.id, g.images.len()));
            }
            for rel in &g.images {
                image_ok(rel, &format!("group {}", g.id), &mut problems);
            }
            match canonical_labels(&c.condition(), g.images.len(), &g.annotations) {
                Ok(canon) if canon != g.annotations => problems.push(format!(
                    "group {}: annotations are not in per-block order",
                    g.id
                )),
                Ok(_) => {}
                Err(diags) => {
                    for d in diags {
                        problems.push(format!(
                            "group {}: image {} block {}: {}",
                            g.id, d.image, d.block_index, d.reason
                        ));
                    }
                }
            }
        }
        for a in &m.audit_log {
            if !group_ids.contains(a.group_id.as_str()) {
                problems.push(format!(
                    "audit entry references missing group {}",
                    a.group_id
                ));
            }
        }
        problems
    }
}
