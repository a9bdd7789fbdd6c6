//! Manifest and records file formats.
//!
//! Manifest (UTF-8): a header `AVZM 1 <n_classes> <Dt>`, then one line per
//! class `<id>\t<name>\t<S|U>\t<Dt space-separated reals>`.
//!
//! Records (little-endian): magic `AVZF`, `u32` version 1, `u32` n_records,
//! Da, Dv, then per record a `u32` class id followed by Da audio and Dv video
//! values as `f32`. Values are widened to `f64` on load.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use super::{ClassInfo, ClassManifest, DataError, Dataset, FeatureRecord, Result, SplitSet};
use crate::io_util::atomic_write;

const MANIFEST_MAGIC: &str = "AVZM";
const RECORDS_MAGIC: [u8; 4] = *b"AVZF";
const VERSION: u32 = 1;

pub fn manifest_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".avzm")
}

/// `<stem>.<split>.avzf` for `split` in `train`, `val`, `test`.
pub fn records_path(stem: &Path, split: &str) -> PathBuf {
    with_suffix(stem, &format!(".{split}.avzf"))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_manifest<W: Write>(manifest: &ClassManifest, mut w: W) -> Result<()> {
    writeln!(w, "{MANIFEST_MAGIC} {VERSION} {} {}", manifest.len(), manifest.text_dim())?;
    for c in manifest.classes() {
        let text: Vec<String> = c.text.iter().map(|v| v.to_string()).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            c.id,
            c.name,
            if c.seen { "S" } else { "U" },
            text.join(" ")
        )?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<ClassManifest> {
    let mut lines = r.lines();
    let bad = |line: usize, message: String| DataError::Manifest { line, message };
    let header = lines.next().ok_or_else(|| bad(1, "empty file".into()))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&MANIFEST_MAGIC) {
        return Err(DataError::BadMagic {
            found: fields.first().unwrap_or(&"").as_bytes().to_vec(),
            expected: MANIFEST_MAGIC,
        });
    }
    if fields.len() != 4 {
        return Err(bad(1, format!("header needs 4 fields, got {}", fields.len())));
    }
    let version: u32 = fields[1].parse().map_err(|_| bad(1, format!("bad version {:?}", fields[1])))?;
    if version != VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let n_classes: usize = fields[2].parse().map_err(|_| bad(1, format!("bad class count {:?}", fields[2])))?;
    let dt: usize = fields[3].parse().map_err(|_| bad(1, format!("bad text dim {:?}", fields[3])))?;

    let mut classes = Vec::with_capacity(n_classes);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(bad(lineno, format!("expected 4 tab-separated fields, got {}", parts.len())));
        }
        let id: u32 = parts[0].parse().map_err(|_| bad(lineno, format!("bad class id {:?}", parts[0])))?;
        let seen = match parts[2] {
            "S" => true,
            "U" => false,
            other => return Err(bad(lineno, format!("seen flag must be S or U, got {other:?}"))),
        };
        let text = parts[3]
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| bad(lineno, format!("bad real {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if text.len() != dt {
            return Err(bad(lineno, format!("expected {dt} text values, got {}", text.len())));
        }
        classes.push(ClassInfo {
            id,
            name: parts[1].to_string(),
            seen,
            text,
        });
    }
    if classes.len() != n_classes {
        return Err(bad(
            classes.len() + 2,
            format!("header declares {n_classes} classes, file has {}", classes.len()),
        ));
    }
    ClassManifest::new(classes)
}

/// Contents of one records file.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordsFile {
    pub audio_dim: usize,
    pub video_dim: usize,
    pub records: Vec<FeatureRecord>,
}

pub fn write_records<W: Write>(records: &[FeatureRecord], audio_dim: usize, video_dim: usize, mut w: W) -> Result<()> {
    let as_u32 = |n: usize, what: &str| {
        u32::try_from(n).map_err(|_| DataError::InvalidArgs(format!("{what} {n} exceeds u32")))
    };
    w.write_all(&RECORDS_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&as_u32(records.len(), "record count")?.to_le_bytes())?;
    w.write_all(&as_u32(audio_dim, "audio dim")?.to_le_bytes())?;
    w.write_all(&as_u32(video_dim, "video dim")?.to_le_bytes())?;
    for (i, r) in records.iter().enumerate() {
        if r.audio.len() != audio_dim || r.video.len() != video_dim {
            return Err(DataError::DimMismatch {
                split: "write",
                record: i,
                what: if r.audio.len() != audio_dim { "audio" } else { "video" },
                expected: if r.audio.len() != audio_dim { audio_dim } else { video_dim },
                actual: if r.audio.len() != audio_dim { r.audio.len() } else { r.video.len() },
            });
        }
        w.write_all(&r.class_id.to_le_bytes())?;
        for v in r.audio.iter().chain(&r.video) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], record: usize) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => DataError::Truncated { record },
        _ => DataError::Stream(e),
    })
}

pub fn read_records<R: Read>(mut r: R, split: &'static str) -> Result<RecordsFile> {
    let mut header = [0u8; 20];
    read_exact_at(&mut r, &mut header[..4], 0)?;
    if header[..4] != RECORDS_MAGIC {
        return Err(DataError::BadMagic {
            found: header[..4].to_vec(),
            expected: "AVZF",
        });
    }
    read_exact_at(&mut r, &mut header[4..], 0)?;
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let (n, da, dv) = (word(8) as usize, word(12) as usize, word(16) as usize);

    let mut records = Vec::with_capacity(n.min(1 << 20));
    let mut buf = vec![0u8; 4 * (1 + da + dv)];
    for record in 0..n {
        read_exact_at(&mut r, &mut buf, record)?;
        let class_id = u32::from_le_bytes(buf[..4].try_into().expect("4 bytes"));
        let mut values = buf[4..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        let audio: Vec<f64> = values.by_ref().take(da).collect();
        let video: Vec<f64> = values.collect();
        for (modality, v) in [("audio", &audio), ("video", &video)] {
            if let Some(coord) = v.iter().position(|x| !x.is_finite()) {
                return Err(DataError::NonFinite {
                    split,
                    record,
                    modality,
                    coord,
                });
            }
        }
        records.push(FeatureRecord { class_id, audio, video });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(DataError::TrailingData { records: n });
    }
    Ok(RecordsFile {
        audio_dim: da,
        video_dim: dv,
        records,
    })
}

/// Writes `<stem>.avzm` and the three split files. Each file is written to a
/// temp sibling and renamed once complete.
pub fn save_dataset(dataset: &Dataset, stem: &Path) -> Result<()> {
    let dims = dataset.dims();
    atomic_write(&manifest_path(stem), |w| write_manifest(&dataset.manifest, w))?;
    for (split, records) in dataset.splits.iter() {
        atomic_write(&records_path(stem, split), |w| {
            write_records(records, dims.audio, dims.video, w)
        })?;
    }
    Ok(())
}

pub fn load_dataset_files(manifest: &Path, train: &Path, val: &Path, test: &Path) -> Result<Dataset> {
    let manifest = read_manifest(open(manifest)?)?;
    let train = read_records(open(train)?, "train")?;
    let val = read_records(open(val)?, "val")?;
    let test = read_records(open(test)?, "test")?;
    for (split, f) in [("val", &val), ("test", &test)] {
        for (what, expected, actual) in [
            ("header audio dim", train.audio_dim, f.audio_dim),
            ("header video dim", train.video_dim, f.video_dim),
        ] {
            if expected != actual {
                return Err(DataError::DimMismatch {
                    split,
                    record: 0,
                    what,
                    expected,
                    actual,
                });
            }
        }
    }
    let (da, dv) = (train.audio_dim, train.video_dim);
    let splits = SplitSet {
        train: train.records,
        validation: val.records,
        test: test.records,
    };
    Dataset::new(manifest, splits, da, dv)
}

pub fn load_dataset(stem: &Path) -> Result<Dataset> {
    load_dataset_files(
        &manifest_path(stem),
        &records_path(stem, "train"),
        &records_path(stem, "val"),
        &records_path(stem, "test"),
    )
}
