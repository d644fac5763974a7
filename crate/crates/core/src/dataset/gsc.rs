//! Google-Speech-Commands-style directory layout:
//! `<dir>/<keyword>/<file>.wav`, with optional `validation_list.txt` and
//! `testing_list.txt` holding `keyword/file.wav` lines.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Entry, Manifest, Split};
use crate::error::{Error, Result};

pub const VAL_LIST: &str = "validation_list.txt";
pub const TEST_LIST: &str = "testing_list.txt";
pub const LABELS_FILE: &str = "labels.txt";

fn read_list(path: &Path) -> Result<HashSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Split assignment from a hash of the file name with any `_nohash_` suffix
/// removed, so all takes of one speaker land in the same split (80/10/10).
pub fn hash_split(file_name: &str) -> Split {
    let stem = file_name.split("_nohash_").next().unwrap_or(file_name);
    let digest = Sha256::digest(stem.as_bytes());
    let bucket = u64::from_le_bytes(digest[..8].try_into().unwrap()) % 100;
    match bucket {
        0..=9 => Split::Val,
        10..=19 => Split::Test,
        _ => Split::Train,
    }
}

/// Enumerate `keywords` under `dir` into train/val/test manifests. Label
/// order is the sorted keyword list. Without list files, splits come from
/// [`hash_split`].
pub fn scan_gsc(
    dir: &Path,
    keywords: &[String],
    val_list: Option<&Path>,
    test_list: Option<&Path>,
) -> Result<(Manifest, Manifest, Manifest)> {
    if keywords.is_empty() {
        return Err(Error::Dataset("no keywords selected".into()));
    }
    let mut labels = keywords.to_vec();
    labels.sort();
    labels.dedup();

    let lists = match (val_list, test_list) {
        (None, None) => None,
        (v, t) => {
            let val = v.map(read_list).transpose()?.unwrap_or_default();
            let test = t.map(read_list).transpose()?.unwrap_or_default();
            let mut both: Vec<&String> = val.intersection(&test).collect();
            if !both.is_empty() {
                both.sort();
                return Err(Error::Dataset(format!(
                    "files listed in both validation and test lists: {}",
                    both.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                )));
            }
            Some((val, test))
        }
    };

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (label, keyword) in labels.iter().enumerate() {
        let kdir = dir.join(keyword);
        if !kdir.is_dir() {
            return Err(Error::Dataset(format!("keyword directory {} is missing", kdir.display())));
        }
        let mut files: Vec<String> = fs::read_dir(&kdir)
            .map_err(|e| Error::io(&kdir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|name| name.ends_with(".wav"))
            .collect();
        files.sort();
        for name in files {
            let key = format!("{keyword}/{name}");
            let split = match &lists {
                Some((v, _)) if v.contains(&key) => Split::Val,
                Some((_, t)) if t.contains(&key) => Split::Test,
                Some(_) => Split::Train,
                None => hash_split(&name),
            };
            let entry = Entry { path: kdir.join(&name), label };
            match split {
                Split::Train => train.push(entry),
                Split::Val => val.push(entry),
                Split::Test => test.push(entry),
            }
        }
    }
    Ok((
        Manifest::new(train, labels.clone(), Split::Train)?,
        Manifest::new(val, labels.clone(), Split::Val)?,
        Manifest::new(test, labels, Split::Test)?,
    ))
}

pub fn read_labels(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Scan a directory that carries its own `labels.txt` (as written by the
/// synthetic generator), using its list files when present.
pub fn scan_with_labels(dir: &Path) -> Result<(Manifest, Manifest, Manifest)> {
    let labels = read_labels(&dir.join(LABELS_FILE))?;
    let val = dir.join(VAL_LIST);
    let test = dir.join(TEST_LIST);
    let (train, val, test) = scan_gsc(dir, &labels, val.is_file().then_some(val.as_path()), test.is_file().then_some(test.as_path()))?;
    // labels.txt defines index order; scan_gsc sorts, so they must agree.
    let mut sorted = labels.clone();
    sorted.sort();
    if sorted != labels {
        return Err(Error::Dataset(format!("{LABELS_FILE} must list labels in sorted order")));
    }
    Ok((train, val, test))
}
