use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// One image with its patient identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub timestamp_index: Option<u32>,
}

/// A validated set of records grouped by patient.
#[derive(Debug, Clone)]
pub struct Manifest {
    records: Vec<ImageRecord>,
    /// Patient id to record indices, ordered by timestamp then file order.
    by_patient: BTreeMap<String, Vec<usize>>,
}

impl Manifest {
    /// Checks id uniqueness and builds the patient index. Does not touch the filesystem.
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Manifest("no records".into()));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate image_id {:?}", r.image_id)));
            }
            if r.patient_id.is_empty() {
                return Err(Error::Manifest(format!("image {:?} has an empty patient_id", r.image_id)));
            }
        }
        let mut by_patient: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_patient.entry(r.patient_id.clone()).or_default().push(i);
        }
        for idx in by_patient.values_mut() {
            idx.sort_by_key(|&i| (records[i].timestamp_index.unwrap_or(u32::MAX), i));
        }
        Ok(Self {
            records,
            by_patient,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_patients(&self) -> usize {
        self.by_patient.len()
    }

    /// Patient ids in sorted order.
    pub fn patients(&self) -> impl Iterator<Item = &str> {
        self.by_patient.keys().map(String::as_str)
    }

    pub fn records_of(&self, patient_id: &str) -> &[usize] {
        self.by_patient.get(patient_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has_all_masks(&self) -> bool {
        self.records.iter().all(|r| r.mask_path.is_some())
    }

    /// Sub-manifest over `indices` (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }
}

const REQUIRED: [&str; 3] = ["image_id", "patient_id", "image_path"];

/// Reads a delimited manifest whose header line names the columns.
///
/// The delimiter is a tab when the header contains one, otherwise a comma.
/// Relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text
        .lines()
        .next()
        .ok_or_else(|| Error::Manifest(format!("{} is empty", path.display())))?;
    let delimiter = if header.contains('\t') { b'\t' } else { b',' };
    let base = path.parent().unwrap_or(Path::new("."));

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    for name in REQUIRED {
        if col(name).is_none() {
            return Err(Error::Manifest(format!("missing column {name:?}")));
        }
    }
    if let Some(unknown) = headers
        .iter()
        .find(|h| !REQUIRED.contains(h) && *h != "mask_path" && *h != "timestamp_index")
    {
        return Err(Error::Manifest(format!("unknown column {unknown:?}")));
    }
    let (c_img, c_pat, c_path) = (col("image_id").unwrap(), col("patient_id").unwrap(), col("image_path").unwrap());
    let (c_mask, c_ts) = (col("mask_path"), col("timestamp_index"));

    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        let field = |c: usize| row.get(c).unwrap_or("").to_string();
        let optional = |c: Option<usize>| c.map(&field).filter(|s| !s.is_empty());
        let timestamp_index = optional(c_ts)
            .map(|s| {
                s.parse::<u32>().map_err(|_| {
                    Error::Manifest(format!("line {}: bad timestamp_index {s:?}", line + 2))
                })
            })
            .transpose()?;
        let image_id = field(c_img);
        if image_id.is_empty() {
            return Err(Error::Manifest(format!("line {}: empty image_id", line + 2)));
        }
        records.push(ImageRecord {
            image_id,
            patient_id: field(c_pat),
            image_path: resolve(&field(c_path)),
            mask_path: optional(c_mask).map(|s| resolve(&s)),
            timestamp_index,
        });
    }
    let manifest = Manifest::new(records)?;

    let missing: Vec<String> = manifest
        .records()
        .iter()
        .flat_map(|r| std::iter::once(&r.image_path).chain(r.mask_path.as_ref()))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Manifest(format!("missing files: {}", missing.join(", "))));
    }
    Ok(manifest)
}

/// Writes a tab-separated manifest with paths relative to its directory when possible.
pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let mut out = String::from("image_id\tpatient_id\timage_path\tmask_path\ttimestamp_index\n");
    for r in manifest.records() {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.image_id,
            r.patient_id,
            rel(&r.image_path),
            r.mask_path.as_deref().map(rel).unwrap_or_default(),
            r.timestamp_index.map(|t| t.to_string()).unwrap_or_default()
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) {
        fs::write(dir.join(name), b"x").unwrap();
    }

    #[test]
    fn counts_patients() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a.png", "b.png", "c.png"] {
            touch(dir.path(), f);
        }
        let p = dir.path().join("m.csv");
        fs::write(&p, "image_id,patient_id,image_path\na,P1,a.png\nb,P1,b.png\nc,P2,c.png\n").unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.num_patients(), 2);
        assert_eq!(m.records_of("P1"), &[0, 1]);
        assert!(m.records()[0].image_path.is_absolute());
    }

    #[test]
    fn duplicate_ids_are_named() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        let p = dir.path().join("m.tsv");
        fs::write(&p, "image_id\tpatient_id\timage_path\nx7\tP1\ta.png\nx7\tP2\ta.png\n").unwrap();
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("x7"), "{err}");
    }

    #[test]
    fn missing_files_are_all_listed() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        let p = dir.path().join("m.tsv");
        fs::write(
            &p,
            "image_id\tpatient_id\timage_path\tmask_path\na\tP1\ta.png\tam.png\nb\tP1\tb.png\t\n",
        )
        .unwrap();
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("am.png") && err.contains("b.png"), "{err}");
    }

    #[test]
    fn timestamps_order_patient_records() {
        let rec = |id: &str, ts| ImageRecord {
            image_id: id.into(),
            patient_id: "P".into(),
            image_path: id.into(),
            mask_path: None,
            timestamp_index: ts,
        };
        let m = Manifest::new(vec![rec("a", Some(2)), rec("b", Some(0)), rec("c", None)]).unwrap();
        assert_eq!(m.records_of("P"), &[1, 0, 2]);
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        touch(dir.path(), "am.png");
        let m = Manifest::new(vec![ImageRecord {
            image_id: "a".into(),
            patient_id: "P".into(),
            image_path: dir.path().join("a.png"),
            mask_path: Some(dir.path().join("am.png")),
            timestamp_index: Some(3),
        }])
        .unwrap();
        let p = dir.path().join("manifest.tsv");
        write_manifest(&m, &p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("\ta.png\tam.png\t3"));
        assert_eq!(load_manifest(&p).unwrap().records(), m.records());
    }
}
