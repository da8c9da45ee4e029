//! On-disk formats.
//!
//! Patch store (little-endian):
//!
//! ```text
//! "LPRD" | u32 version = 1 | u32 count | u16 height | u16 width | count·height·width bytes
//! ```
//!
//! Pairs file: UTF-8, one `index_a<TAB>index_b<TAB>label` per line, `#` lines
//! ignored except for an optional `# split=train|test` directive.

use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, PairIndex, Patch, PatchDataset, PatchStore, Split};
use crate::losses::Label;

pub const STORE_MAGIC: &[u8; 4] = b"LPRD";
pub const STORE_VERSION: u32 = 1;
pub const STORE_FILE: &str = "patches.lprd";
pub const PAIRS_FILE: &str = "pairs.tsv";
const HEADER_LEN: usize = 4 + 4 + 4 + 2 + 2;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

pub fn write_patch_store(store: &PatchStore) -> Result<Vec<u8>, DataError> {
    let too_big = |what: &str| DataError::Invalid(format!("{what} does not fit the store header"));
    let h = u16::try_from(store.height).map_err(|_| too_big("height"))?;
    let w = u16::try_from(store.width).map_err(|_| too_big("width"))?;
    let count = u32::try_from(store.len()).map_err(|_| too_big("count"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + store.raw().len());
    out.extend_from_slice(STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(store.raw());
    Ok(out)
}

pub fn read_patch_store(bytes: &[u8]) -> Result<PatchStore, DataError> {
    let fmt = |offset: usize, message: String| DataError::Format { offset, message };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(
            bytes.len(),
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[0..4] != STORE_MAGIC {
        return Err(fmt(0, format!("bad magic {:?}, expected \"LPRD\"", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != STORE_VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
    let w = u16::from_le_bytes(bytes[14..16].try_into().unwrap()) as usize;
    if h == 0 || w == 0 {
        return Err(fmt(12, format!("zero patch size {h}x{w}")));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = count * h * w;
    if payload.len() < expected {
        return Err(fmt(
            bytes.len(),
            format!("truncated payload: {count} patches of {h}x{w} need {expected} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(fmt(HEADER_LEN + expected, "trailing bytes after payload".into()));
    }
    PatchStore::from_raw(h, w, payload.to_vec())
}

pub fn write_pairs(pairs: &[PairIndex], split: Split) -> String {
    let mut out = format!("# split={}\n", split.name());
    for p in pairs {
        out.push_str(&format!("{}\t{}\t{}\n", p.a, p.b, p.label.bit()));
    }
    out
}

/// Parses a pairs file, checking indices against `count` patches.
/// Returns the pairs and the split directive, if one was present.
pub fn parse_pairs(text: &str, count: usize) -> Result<(Vec<PairIndex>, Option<Split>), DataError> {
    let mut pairs = Vec::new();
    let mut split = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim_end_matches('\r');
        if let Some(comment) = l.strip_prefix('#') {
            if let Some(s) = comment.trim().strip_prefix("split=") {
                split = Some(Split::parse(s.trim()).ok_or_else(|| DataError::PairLine {
                    line,
                    message: format!("unknown split {s:?}"),
                })?);
            }
            continue;
        }
        if l.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() != 3 {
            return Err(DataError::PairLine {
                line,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| {
            s.trim().parse::<usize>().map_err(|e| DataError::PairLine {
                line,
                message: format!("{what} {s:?}: {e}"),
            })
        };
        let a = num(fields[0], "index_a")?;
        let b = num(fields[1], "index_b")?;
        let label = match fields[2].trim() {
            "0" => Label::NonMatch,
            "1" => Label::Match,
            other => {
                return Err(DataError::PairLine {
                    line,
                    message: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        for index in [a, b] {
            if index >= count {
                return Err(DataError::IndexOutOfBounds { line, index, count });
            }
        }
        pairs.push(PairIndex { a, b, label });
    }
    Ok((pairs, split))
}

/// Writes `patches.lprd` and `pairs.tsv` into `dir`, creating it if needed.
pub fn save_dataset(ds: &PatchDataset, dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let store = write_patch_store(&ds.store)?;
    let sp = dir.join(STORE_FILE);
    fs::write(&sp, store).map_err(io_err(&sp))?;
    let pp = dir.join(PAIRS_FILE);
    fs::write(&pp, write_pairs(&ds.pairs, ds.split)).map_err(io_err(&pp))?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<PatchDataset, DataError> {
    let dir = dir.as_ref();
    let sp = dir.join(STORE_FILE);
    let store = read_patch_store(&fs::read(&sp).map_err(io_err(&sp))?)?;
    let pp = dir.join(PAIRS_FILE);
    let text = fs::read_to_string(&pp).map_err(io_err(&pp))?;
    let (pairs, split) = parse_pairs(&text, store.len())?;
    PatchDataset::new(store, pairs, split.unwrap_or(Split::Train))
}

/// Parses a binary (P5) PGM with maxval 255.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Patch, DataError> {
    let err = |message: String| DataError::Pgm { path: path.to_path_buf(), message };
    let mut pos = 0;
    let token = |pos: &mut usize| -> Option<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    match token(&mut pos).as_deref() {
        Some("P5") => {}
        other => return Err(err(format!("expected binary PGM magic P5, found {other:?}"))),
    }
    let mut field = |name: &str| -> Result<usize, DataError> {
        let t = token(&mut pos).ok_or_else(|| err(format!("missing {name}")))?;
        t.parse().map_err(|_| err(format!("bad {name} {t:?}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(err(format!("maxval must be 255, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    if n == 0 || bytes.len() < pos + n {
        return Err(err(format!("raster needs {n} bytes, found {}", bytes.len().saturating_sub(pos))));
    }
    Patch::new(height, width, bytes[pos..pos + n].to_vec())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Patch, DataError> {
    let path = path.as_ref();
    parse_pgm(&fs::read(path).map_err(io_err(path))?, path)
}

pub fn write_pgm(patch: &Patch, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", patch.width, patch.height).into_bytes();
    out.extend_from_slice(&patch.pixels);
    fs::write(path, out).map_err(io_err(path))
}

/// Builds a dataset from a directory of `.pgm` files (indexed in lexicographic
/// filename order) and a pairs file.
pub fn import_pgm_dir(dir: impl AsRef<Path>, pairs: impl AsRef<Path>, split: Split) -> Result<PatchDataset, DataError> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort();
    let mut store: Option<PatchStore> = None;
    for f in &files {
        let p = read_pgm(f)?;
        let s = store.get_or_insert_with(|| PatchStore::new(p.height, p.width));
        s.push(&p)?;
    }
    let store = store.ok_or_else(|| DataError::Invalid(format!("no .pgm files in {}", dir.display())))?;
    let pp = pairs.as_ref();
    let text = fs::read_to_string(pp).map_err(io_err(pp))?;
    let (pairs, declared) = parse_pairs(&text, store.len())?;
    PatchDataset::new(store, pairs, declared.unwrap_or(split))
}
