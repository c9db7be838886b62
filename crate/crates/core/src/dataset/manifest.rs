//! Tab-separated dataset manifests.
//!
//! ```text
//! # comment lines start with '#'
//! id	image_path	count	split	mask_path	geo_bounds
//! t0001	images/t0001.png	12	train	masks/t0001.png	30.0,30.001,31.2,31.201
//! t0002	images/t0002.png	0	test
//! ```
//!
//! The header row is optional on input and always written on output. The
//! last two columns may be omitted or left empty (`-` also means "none").
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{load_mask, load_rgb, GeoBounds, ImageTile, TileSource};
use crate::{Error, Result};

pub const HEADER: &str = "id\timage_path\tcount\tsplit\tmask_path\tgeo_bounds";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}' (expected train, val or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub count: u32,
    pub split: Split,
    pub mask_path: Option<PathBuf>,
    pub geo_bounds: Option<GeoBounds>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

/// Read, parse and validate a manifest file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let manifest = Manifest::parse(&text, base, path)?;
    manifest.validate_files()?;
    Ok(manifest)
}

fn optional(field: Option<&str>) -> Option<&str> {
    field.map(str::trim).filter(|f| !f.is_empty() && *f != "-")
}

impl Manifest {
    /// Parse manifest text; relative paths are joined onto `base`. `source`
    /// only labels error messages.
    pub fn parse(text: &str, base: &Path, source: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        let mut first_record = true;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: source.to_path_buf(),
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if first_record {
                first_record = false;
                if fields.first().map(|f| f.trim()) == Some("id") {
                    continue;
                }
            }
            if !(4..=6).contains(&fields.len()) {
                return Err(err(format!(
                    "expected 4 to 6 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let id = fields[0].trim();
            if id.is_empty() {
                return Err(err("empty id".into()));
            }
            if !seen.insert(id.to_string()) {
                return Err(err(format!("duplicate id '{id}' (splits must be disjoint)")));
            }
            let image = fields[1].trim();
            if image.is_empty() {
                return Err(err("empty image path".into()));
            }
            let count = fields[2]
                .trim()
                .parse::<u32>()
                .map_err(|_| err(format!("count '{}' is not a non-negative integer", fields[2].trim())))?;
            let split = fields[3].trim().parse::<Split>().map_err(err)?;
            let mask_path = optional(fields.get(4).copied()).map(|m| base.join(m));
            let geo_bounds = optional(fields.get(5).copied())
                .map(|g| g.parse::<GeoBounds>())
                .transpose()
                .map_err(|e| err(e.to_string()))?;
            entries.push(ManifestEntry {
                id: id.to_string(),
                image_path: base.join(image),
                count,
                split,
                mask_path,
                geo_bounds,
            });
        }
        Ok(Self { entries })
    }

    /// Check that every referenced image (and mask) can be opened.
    pub fn validate_files(&self) -> Result<()> {
        for e in &self.entries {
            for p in std::iter::once(&e.image_path).chain(e.mask_path.as_ref()) {
                fs::File::open(p).map_err(|err| {
                    Error::Validation(format!("entry '{}': cannot open {}: {err}", e.id, p.display()))
                })?;
            }
        }
        Ok(())
    }

    /// Serialise, writing paths relative to `base` where possible.
    pub fn to_tsv(&self, base: &Path) -> String {
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/")
        };
        let mut out = String::from(HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.id,
                rel(&e.image_path),
                e.count,
                e.split,
                e.mask_path.as_deref().map(rel).unwrap_or_else(|| "-".into()),
                e.geo_bounds.map(|g| g.to_string()).unwrap_or_else(|| "-".into()),
            ));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        fs::write(path, self.to_tsv(base)).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> Manifest {
        Manifest {
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
        }
    }

    pub fn load_tile(&self, index: usize) -> Result<ImageTile> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| Error::Domain(format!("manifest index {index} out of range")))?;
        let mut tile = ImageTile::new(e.id.clone(), load_rgb(&e.image_path)?, e.count);
        tile.geo_bounds = e.geo_bounds;
        if let Some(m) = &e.mask_path {
            tile = tile.with_mask(load_mask(m)?)?;
        }
        Ok(tile)
    }
}

impl TileSource for Manifest {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn tile(&self, index: usize) -> Result<ImageTile> {
        self.load_tile(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_images(dir: &Path, names: &[&str]) {
        for n in names {
            image::RgbImage::new(4, 4).save(dir.join(n)).unwrap();
        }
    }

    #[test]
    fn three_row_file() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a.png", "b.png", "c.png"]);
        let text = format!(
            "# test\n{HEADER}\na\ta.png\t3\ttrain\nb\tb.png\t0\tval\t-\t1,2,3,4\nc\tc.png\t61\ttest\t\t\n"
        );
        let path = dir.path().join("m.tsv");
        fs::write(&path, text).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.entries[1].geo_bounds.unwrap().lon_max, 4.0);
        assert_eq!(m.entries[2].count, 61);
        assert_eq!(m.split(Split::Val).len(), 1);
    }

    #[test]
    fn negative_count_names_the_line() {
        let err = Manifest::parse("id\timage_path\tcount\tsplit\nx\tx.png\t-2\ttrain\n", Path::new(""), Path::new("m.tsv"))
            .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn missing_file_and_missing_image() {
        assert!(matches!(load_manifest("/nonexistent/m.tsv"), Err(Error::Io { .. })));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "a\tmissing.png\t1\ttrain\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = Manifest::parse("a\tx.png\t1\ttrain\na\ty.png\t2\ttest\n", Path::new(""), Path::new("m"));
        assert!(matches!(r, Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn load_serialise_load_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("img")).unwrap();
        write_images(&dir.path().join("img"), &["a.png", "b.png"]);
        let path = dir.path().join("m.tsv");
        fs::write(&path, "a\timg/a.png\t3\ttrain\timg/b.png\nb\timg/b.png\t7\ttest\t-\t1,2,3,4\n").unwrap();
        let first = load_manifest(&path).unwrap();
        first.write(&path).unwrap();
        let second = load_manifest(&path).unwrap();
        assert_eq!(first, second);
        let text = fs::read_to_string(&path).unwrap();
        second.write(&path).unwrap();
        assert_eq!(text, fs::read_to_string(&path).unwrap());
    }
}
