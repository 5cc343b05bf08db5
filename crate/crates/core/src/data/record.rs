use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentOp;
use crate::error::{Error, Result};
use crate::geometry::{to_pixels, BBox, NormBox, Warning};

pub const MANIFEST_SCHEMA: &str = "1";

macro_rules! token_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $tok:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $tok),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl std::str::FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($tok => Ok($name::$variant),)+
                    other => Err(Error::InvalidParam(format!(
                        "unknown {} token {other:?}", stringify!($name).to_lowercase()
                    ))),
                }
            }
        }
    };
}

token_enum!(Variety { Chardonnay => "chardonnay", Merlot => "merlot" });
token_enum!(Weather { Sunny => "sunny", Cloudy => "cloudy" });
token_enum!(
    /// Binarized berry maturity; records from the intermediate stage carry none.
    Maturity { Immature => "immature", Mature => "mature" }
);
token_enum!(Sunlight { Morning => "morning", Noon => "noon", Afternoon => "afternoon" });
token_enum!(Split { Train => "train", Val => "val", Test => "test", Unassigned => "unassigned" });

impl Default for Split {
    fn default() -> Self {
        Split::Unassigned
    }
}

/// How an augmented record was derived from its raw parent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `image_path` of the raw parent.
    pub parent: String,
    pub variant: usize,
    pub op: AugmentOp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub variety: Variety,
    pub weather: Weather,
    pub maturity: Option<Maturity>,
    pub sunlight: Sunlight,
    pub capture_date: NaiveDate,
    pub vine_id: String,
    pub source_id: String,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub boxes: Vec<NormBox>,
    #[serde(default)]
    pub canopy_roi: Option<BBox>,
    /// Absent for raw images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    /// Set by debar: the record is for count evaluation only.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub eval_only: bool,
}

impl ImageRecord {
    pub fn is_raw(&self) -> bool {
        self.provenance.is_none()
    }

    /// Ground-truth boxes in pixels of this record's image.
    pub fn pixel_boxes(&self) -> Vec<BBox> {
        let (w, h) = (self.width as f64, self.height as f64);
        self.boxes.iter().map(|b| to_pixels(b, w, h).0).collect()
    }

    /// Label file name, derived from the image file stem.
    pub fn label_file_name(&self) -> String {
        let stem = Path::new(&self.image_path).file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        format!("{stem}.txt")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRecord {
    pub vine_id: String,
    pub field_count: u32,
    pub label_count: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub schema_version: String,
    pub records: Vec<ImageRecord>,
    pub counts: Vec<CountRecord>,
    /// Directory that relative image paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>, counts: Vec<CountRecord>, root: impl Into<PathBuf>) -> Self {
        Self { schema_version: MANIFEST_SCHEMA.to_string(), records, counts, root: root.into() }
    }

    pub fn image_path(&self, rec: &ImageRecord) -> PathBuf {
        self.root.join(&rec.image_path)
    }

    pub fn raw_records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| r.is_raw())
    }

    pub fn with_split(&self, split: Split) -> DatasetManifest {
        let records = self.records.iter().filter(|r| r.split == split).cloned().collect();
        DatasetManifest { records, ..self.clone() }
    }

    /// Check the type invariants, returning warnings for repairable issues.
    pub fn validate(&self) -> Result<()> {
        let mut paths = HashSet::new();
        let mut raw_sources = HashSet::new();
        let mut split_of: HashMap<&str, Split> = HashMap::new();
        for r in &self.records {
            if r.width == 0 || r.height == 0 {
                return Err(Error::InvalidParam(format!("{}: zero image extent", r.image_path)));
            }
            if let Some(b) = r.boxes.iter().find(|b| !b.in_range()) {
                return Err(Error::InvalidParam(format!("{}: box {b:?} outside the unit square", r.image_path)));
            }
            if !paths.insert(r.image_path.as_str()) {
                return Err(Error::InvalidParam(format!("duplicate image_path {}", r.image_path)));
            }
            if r.is_raw() && !raw_sources.insert(r.source_id.as_str()) {
                return Err(Error::InvalidParam(format!("source_id {} shared by two raw records", r.source_id)));
            }
            match split_of.get(r.source_id.as_str()) {
                Some(&s) if s != r.split => {
                    return Err(Error::InvalidParam(format!(
                        "source_id {} spans splits {s} and {}",
                        r.source_id, r.split
                    )))
                }
                _ => {
                    split_of.insert(&r.source_id, r.split);
                }
            }
        }
        Ok(())
    }

    /// Write `manifest.jsonl`, one label file per record under `labels/`,
    /// and `counts.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("labels"))?;
        write_manifest(&dir.join("manifest.jsonl"), &self.records)?;
        for r in &self.records {
            write_labels(&dir.join("labels").join(r.label_file_name()), &r.boxes, None)?;
        }
        write_counts(&dir.join("counts.csv"), &self.counts)
    }
}

pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a JSON-lines manifest, trusting the boxes embedded in each line.
pub fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let display = path.display().to_string();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: display.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Lines `class cx cy w h` with six decimals, plus a confidence column when given.
pub fn write_labels(path: &Path, boxes: &[NormBox], confidences: Option<&[f64]>) -> Result<()> {
    let mut s = String::new();
    for (i, b) in boxes.iter().enumerate() {
        s.push_str(&format!("{} {:.6} {:.6} {:.6} {:.6}", b.class_id, b.cx, b.cy, b.w, b.h));
        if let Some(c) = confidences {
            s.push_str(&format!(" {:.6}", c[i]));
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Parsed label file: boxes, optional confidences, and repair warnings.
pub struct Labels {
    pub boxes: Vec<NormBox>,
    pub confidences: Vec<Option<f64>>,
    pub warnings: Vec<Warning>,
}

pub fn read_labels(path: &Path) -> Result<Labels> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut labels = Labels { boxes: Vec::new(), confidences: Vec::new(), warnings: Vec::new() };
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { path: display.clone(), line: i + 1, message };
        if fields.len() != 5 && fields.len() != 6 {
            return Err(err(format!("expected `class cx cy w h [conf]`, got {} fields", fields.len())));
        }
        let class_id: u32 = fields[0].parse().map_err(|_| err(format!("bad class id {:?}", fields[0])))?;
        let mut v = [0.0; 5];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f.parse::<f64>().map_err(|_| err(format!("bad number {f:?}")))?;
            if !v[k].is_finite() {
                return Err(err(format!("non-finite value {f:?}")));
            }
        }
        let b = NormBox::new(class_id, v[0], v[1], v[2], v[3]);
        let b = if b.in_range() {
            b
        } else {
            match b.clipped() {
                Some(c) => {
                    labels.warnings.push(Warning::new(format!("{display}:{}", i + 1), format!("{b:?} clipped to {c:?}")));
                    c
                }
                None => {
                    labels.warnings.push(Warning::new(format!("{display}:{}", i + 1), format!("{b:?} has no area; dropped")));
                    continue;
                }
            }
        };
        labels.boxes.push(b);
        labels.confidences.push((fields.len() == 6).then_some(v[4]));
    }
    Ok(labels)
}

pub fn write_counts(path: &Path, counts: &[CountRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if counts.is_empty() {
        w.write_record(["vine_id", "field_count", "label_count"])?;
    }
    for c in counts {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_counts(path: &Path) -> Result<Vec<CountRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<CountRecord>, _>>()?)
}

/// Load a manifest and attach boxes from `labels_dir` (one `<image stem>.txt`
/// per record). Counts are read from `counts.csv` beside the manifest when
/// present. Missing label files yield zero boxes and a warning.
pub fn ingest(manifest_path: &Path, labels_dir: &Path) -> Result<(DatasetManifest, Vec<Warning>)> {
    let mut records = read_manifest(manifest_path)?;
    let mut warnings = Vec::new();
    for r in &mut records {
        let label_path = labels_dir.join(r.label_file_name());
        if label_path.exists() {
            let labels = read_labels(&label_path)?;
            r.boxes = labels.boxes;
            warnings.extend(labels.warnings);
        } else {
            r.boxes.clear();
            warnings.push(Warning::new(&r.image_path, format!("no label file at {}", label_path.display())));
        }
    }
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let counts_path = root.join("counts.csv");
    let counts = if counts_path.exists() { read_counts(&counts_path)? } else { Vec::new() };
    let m = DatasetManifest::new(records, counts, root);
    m.validate()?;
    Ok((m, warnings))
}

/// Load a dataset directory written by [`DatasetManifest::save`], trusting
/// the boxes embedded in the manifest.
pub fn load_dir(dir: &Path) -> Result<DatasetManifest> {
    let records = read_manifest(&dir.join("manifest.jsonl"))?;
    let counts_path = dir.join("counts.csv");
    let counts = if counts_path.exists() { read_counts(&counts_path)? } else { Vec::new() };
    let m = DatasetManifest::new(records, counts, dir);
    m.validate()?;
    Ok(m)
}

/// Group records by vine, keeping manifest order within each vine.
pub fn by_vine(records: &[ImageRecord]) -> BTreeMap<&str, Vec<&ImageRecord>> {
    let mut map: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.vine_id.as_str()).or_default().push(r);
    }
    map
}

#[cfg(test)]
pub(crate) fn sample_record(i: usize) -> ImageRecord {
    ImageRecord {
        image_path: format!("images/img{i:04}.png"),
        width: 100,
        height: 100,
        variety: Variety::Chardonnay,
        weather: Weather::Sunny,
        maturity: Some(Maturity::Mature),
        sunlight: Sunlight::Noon,
        capture_date: NaiveDate::from_ymd_opt(2021, 8, 1).unwrap(),
        vine_id: format!("vine{i:03}"),
        source_id: format!("src{i:04}"),
        split: Split::Unassigned,
        boxes: vec![NormBox::new(0, 0.5, 0.5, 0.2, 0.1)],
        canopy_roi: None,
        provenance: None,
        eval_only: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_enum_token_is_named_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let good = serde_json::to_string(&sample_record(0)).unwrap();
        let bad = good.replace("\"sunny\"", "\"foggy\"");
        let p = dir.path().join("m.jsonl");
        fs::write(&p, format!("{good}\n{bad}\n")).unwrap();
        match read_manifest(&p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("foggy"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ingest_reads_labels_and_tolerates_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (0..3).map(sample_record).collect();
        write_manifest(&dir.path().join("manifest.jsonl"), &recs).unwrap();
        let labels = dir.path().join("labels");
        fs::create_dir_all(&labels).unwrap();
        fs::write(labels.join("img0000.txt"), "0 0.5 0.5 0.2 0.1\n0 0.95 0.5 0.2 0.1\n").unwrap();
        fs::write(labels.join("img0001.txt"), "").unwrap();
        let (m, warnings) = ingest(&dir.path().join("manifest.jsonl"), &labels).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.records[0].boxes.len(), 2);
        assert!(m.records[0].boxes.iter().all(NormBox::in_range));
        assert!(m.records[1].boxes.is_empty());
        assert!(m.records[2].boxes.is_empty());
        // one clipped box, one missing label file
        assert_eq!(warnings.len(), 2);
    }

    #[test]
    fn label_round_trip_uses_six_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_labels(&p, &[NormBox::new(0, 0.5, 0.25, 0.125, 0.1)], Some(&[0.75])).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "0 0.500000 0.250000 0.125000 0.100000 0.750000\n");
        let l = read_labels(&p).unwrap();
        assert_eq!(l.confidences, [Some(0.75)]);
        fs::write(&p, "0 0.5 x 0.1 0.1\n").unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn counts_csv_has_fixed_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let c = vec![CountRecord { vine_id: "v1".into(), field_count: 12, label_count: 10 }];
        write_counts(&p, &c).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "vine_id,field_count,label_count\nv1,12,10\n");
        assert_eq!(read_counts(&p).unwrap(), c);
    }

    #[test]
    fn validation_catches_split_leakage() {
        let mut a = sample_record(0);
        a.split = Split::Train;
        let mut b = sample_record(1);
        b.source_id = a.source_id.clone();
        b.provenance = Some(Provenance {
            parent: a.image_path.clone(),
            variant: 0,
            op: AugmentOp::ChannelEnhance { gains: [1.0; 3] },
        });
        b.split = Split::Test;
        let m = DatasetManifest::new(vec![a, b], vec![], ".");
        assert!(m.validate().is_err());
    }
}
