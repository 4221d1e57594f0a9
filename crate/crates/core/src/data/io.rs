use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"ZSFB";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 8 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Sketch,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Sketch => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Image),
            1 => Some(Modality::Sketch),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Sketch => "sketch",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "sketch" => Ok(Modality::Sketch),
            _ => Err(Error::Config(format!("unknown modality '{s}' (expected image or sketch)"))),
        }
    }
}

/// One feature vector with its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub label: u32,
    pub modality: Modality,
    pub vector: Vec<f64>,
}

/// Serializes records of one modality. Values are stored as `f32`.
pub fn encode_features(modality: Modality, records: &[FeatureRecord]) -> Result<Vec<u8>> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    for (i, r) in records.iter().enumerate() {
        if r.modality != modality {
            return Err(Error::Data(format!(
                "record {i} is {} but the file holds {modality} features",
                r.modality
            )));
        }
        if r.vector.len() != dim {
            return Err(Error::Data(format!(
                "record {i} has width {} but the first record has width {dim}",
                r.vector.len()
            )));
        }
    }
    let dim32 = u32::try_from(dim).map_err(|_| Error::Data(format!("width {dim} exceeds u32")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + records.len() * (4 + 4 * dim));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.push(modality.code());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    out.extend_from_slice(&dim32.to_le_bytes());
    for r in records {
        out.extend_from_slice(&r.label.to_le_bytes());
        for &v in &r.vector {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                detail: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

/// Parses a feature file image. Returns the file's modality, width and records.
pub fn decode_features(buf: &[u8]) -> Result<(Modality, usize, Vec<FeatureRecord>)> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("bad magic {magic:?}, expected \"ZSFB\""),
        });
    }
    let version = u16::from_le_bytes(r.array("version")?);
    if version != FEATURE_VERSION {
        return Err(Error::Parse {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let code = r.array::<1>("modality")?[0];
    let modality = Modality::from_code(code).ok_or_else(|| Error::Parse {
        offset: 6,
        detail: format!("unknown modality code {code}"),
    })?;
    let count = u64::from_le_bytes(r.array("record count")?);
    let dim = u32::from_le_bytes(r.array("width")?) as usize;
    let record_len = 4 + 4 * dim as u64;
    let available = (buf.len() - r.pos) as u64;
    if count.checked_mul(record_len).is_none_or(|need| need > available) {
        let whole = available / record_len;
        return Err(Error::Parse {
            offset: r.pos as u64 + whole * record_len,
            detail: format!("truncated: header promises {count} records of width {dim}, file holds {whole}"),
        });
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let label = u32::from_le_bytes(r.array("label")?);
        let raw = r.take(4 * dim, "vector")?;
        let vector = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect();
        records.push(FeatureRecord { label, modality, vector });
    }
    if r.pos != buf.len() {
        return Err(Error::Parse {
            offset: r.pos as u64,
            detail: format!("{} trailing bytes after the last record", buf.len() - r.pos),
        });
    }
    Ok((modality, dim, records))
}

pub fn save_features(path: &Path, modality: Modality, records: &[FeatureRecord]) -> Result<()> {
    let bytes = encode_features(modality, records)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map(|(_, _, r)| r)
}

/// Reads `label,f0,...,f{d-1}` rows. Values go through `f32` so CSV and
/// binary inputs are interchangeable.
pub fn parse_csv(text: &str, modality: Modality) -> Result<Vec<FeatureRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") {
        return Err(Error::Data("csv header must start with 'label'".into()));
    }
    let dim = cols.len() - 1;
    for (i, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(Error::Data(format!("csv header column {} is '{c}', expected 'f{i}'", i + 1)));
        }
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(Error::Data(format!(
                "csv line {}: {} values, expected {}",
                n + 1,
                fields.len() - 1,
                dim
            )));
        }
        let label = fields[0]
            .parse::<u32>()
            .map_err(|e| Error::Data(format!("csv line {}: bad label '{}': {e}", n + 1, fields[0])))?;
        let vector = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f32>()
                    .map(f64::from)
                    .map_err(|e| Error::Data(format!("csv line {}: bad value '{f}': {e}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(FeatureRecord { label, modality, vector });
    }
    Ok(out)
}

pub fn load_csv(path: &Path, modality: Modality) -> Result<Vec<FeatureRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, modality)
}

/// Loads binary files, or CSV when the extension is `.csv`.
pub fn load_any(path: &Path, modality: Modality) -> Result<Vec<FeatureRecord>> {
    let records = if path.extension().is_some_and(|e| e == "csv") {
        load_csv(path, modality)?
    } else {
        load_features(path)?
    };
    if let Some(r) = records.iter().find(|r| r.modality != modality) {
        return Err(Error::Data(format!(
            "{} holds {} features, expected {modality}",
            path.display(),
            r.modality
        )));
    }
    Ok(records)
}

/// Sidecar listing feature files and class names.
///
/// ```text
/// image<TAB>images.zsfb
/// sketch<TAB>sketches.zsfb
/// 0<TAB>airplane
/// ```
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub files: Vec<(Modality, PathBuf)>,
    pub classes: BTreeMap<u32, String>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('\t') else {
                return Err(Error::Data(format!("manifest line {}: expected two tab-separated fields", n + 1)));
            };
            if let Ok(id) = key.parse::<u32>() {
                if m.classes.insert(id, value.to_string()).is_some() {
                    return Err(Error::Data(format!("manifest line {}: duplicate class id {id}", n + 1)));
                }
            } else {
                let modality = key
                    .parse::<Modality>()
                    .map_err(|_| Error::Data(format!("manifest line {}: unknown key '{key}'", n + 1)))?;
                m.files.push((modality, PathBuf::from(value)));
            }
        }
        Ok(m)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (m, p) in &self.files {
            s.push_str(&format!("{m}\t{}\n", p.display()));
        }
        for (id, name) in &self.classes {
            s.push_str(&format!("{id}\t{name}\n"));
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.render().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Image and sketch records of a dataset with class names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<FeatureRecord>,
    pub sketches: Vec<FeatureRecord>,
    pub classes: BTreeMap<u32, String>,
}

impl Dataset {
    /// Loads every file listed in a manifest; relative paths resolve
    /// against the manifest's directory.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let manifest = Manifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut ds = Dataset {
            classes: manifest.classes.clone(),
            ..Dataset::default()
        };
        for (modality, file) in &manifest.files {
            let full = if file.is_absolute() { file.clone() } else { base.join(file) };
            let records = load_any(&full, *modality)?;
            match modality {
                Modality::Image => ds.images.extend(records),
                Modality::Sketch => ds.sketches.extend(records),
            }
        }
        ds.check_widths()?;
        Ok(ds)
    }

    fn check_widths(&self) -> Result<()> {
        for (name, recs) in [("image", &self.images), ("sketch", &self.sketches)] {
            if let Some(first) = recs.first() {
                if let Some((i, r)) = recs.iter().enumerate().find(|(_, r)| r.vector.len() != first.vector.len()) {
                    return Err(Error::Data(format!(
                        "{name} record {i} has width {}, expected {}",
                        r.vector.len(),
                        first.vector.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn image_dim(&self) -> Option<usize> {
        self.images.first().map(|r| r.vector.len())
    }

    pub fn sketch_dim(&self) -> Option<usize> {
        self.sketches.first().map(|r| r.vector.len())
    }
}
