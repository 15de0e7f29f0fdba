//! On-disk episode directories: one PGM per image and per mask plus a `meta` file.
//!
//! ```text
//! support_c{c}_k{k}.pgm, support_c{c}_k{k}_mask.pgm   c = slot - 1, k = shot (both from 0)
//! query_{i}.pgm, query_{i}_mask.pgm
//! meta                                              `key = value` lines
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::pgm::Pgm;
use super::{Episode, QueryExample, SupportExample};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta";

pub fn support_image_name(c: usize, k: usize) -> String {
    format!("support_c{c}_k{k}.pgm")
}

pub fn support_mask_name(c: usize, k: usize) -> String {
    format!("support_c{c}_k{k}_mask.pgm")
}

pub fn query_image_name(i: usize) -> String {
    format!("query_{i}.pgm")
}

pub fn query_mask_name(i: usize) -> String {
    format!("query_{i}_mask.pgm")
}

pub fn write_episode(dir: &Path, episode: &Episode, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &episode.support {
        let c = s.slot as usize - 1;
        Pgm::from_image(&s.image)?.write(&dir.join(support_image_name(c, s.shot)))?;
        Pgm::from_mask(&s.mask).write(&dir.join(support_mask_name(c, s.shot)))?;
    }
    for (i, q) in episode.query.iter().enumerate() {
        Pgm::from_image(&q.image)?.write(&dir.join(query_image_name(i)))?;
        Pgm::from_mask(&q.mask).write(&dir.join(query_mask_name(i)))?;
    }
    let classes: Vec<String> = episode.classes.iter().map(|c| c.to_string()).collect();
    let mut meta = String::new();
    writeln!(meta, "seed = {seed}").unwrap();
    writeln!(meta, "classes = {}", classes.join(" ")).unwrap();
    writeln!(meta, "shots = {}", episode.shots).unwrap();
    writeln!(meta, "queries = {}", episode.query.len()).unwrap();
    let path = dir.join(META_FILE);
    std::fs::write(&path, meta).map_err(|e| Error::io(path, e))
}

/// Reads an episode directory, returning the episode and its recorded seed.
pub fn read_episode(dir: &Path) -> Result<(Episode, u64)> {
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut seed = None;
    let mut classes = None;
    let mut shots = None;
    let mut queries = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::format(&meta_path, format!("line {}: `{line}`", n + 1));
        let (key, value) = line.split_once('=').ok_or_else(bad)?;
        let value = value.trim();
        match key.trim() {
            "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad())?),
            "classes" => {
                let ids: std::result::Result<Vec<usize>, _> =
                    value.split_whitespace().map(str::parse).collect();
                classes = Some(ids.map_err(|_| bad())?);
            }
            "shots" => shots = Some(value.parse::<usize>().map_err(|_| bad())?),
            "queries" => queries = Some(value.parse::<usize>().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    let missing = |k: &str| Error::format(&meta_path, format!("missing `{k}`"));
    let seed = seed.ok_or_else(|| missing("seed"))?;
    let classes = classes.ok_or_else(|| missing("classes"))?;
    let shots = shots.ok_or_else(|| missing("shots"))?;
    let queries = queries.ok_or_else(|| missing("queries"))?;

    let mut support = Vec::with_capacity(classes.len() * shots);
    for c in 0..classes.len() {
        for k in 0..shots {
            support.push(SupportExample {
                slot: (c + 1) as u8,
                shot: k,
                image: Pgm::read(&dir.join(support_image_name(c, k)))?.to_image(),
                mask: Pgm::read(&dir.join(support_mask_name(c, k)))?.to_mask(),
            });
        }
    }
    let query = (0..queries)
        .map(|i| {
            Ok(QueryExample {
                image: Pgm::read(&dir.join(query_image_name(i)))?.to_image(),
                mask: Pgm::read(&dir.join(query_mask_name(i)))?.to_mask(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let episode = Episode {
        classes,
        shots,
        support,
        query,
    };
    episode
        .validate()
        .map_err(|e| Error::format(dir, e.to_string()))?;
    Ok((episode, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{make_split, sample_episode, ShapeDatasetConfig, SplitPart};

    #[test]
    fn episode_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let split = make_split(12, 1.0 / 3.0, 3).unwrap();
        let ep = sample_episode(
            &ShapeDatasetConfig::default(),
            &split,
            SplitPart::Seen,
            2,
            2,
            1,
            77,
        )
        .unwrap();
        write_episode(dir.path(), &ep, 77).unwrap();
        let (back, seed) = read_episode(dir.path()).unwrap();
        assert_eq!(seed, 77);
        assert_eq!(back, ep);
    }

    #[test]
    fn malformed_directory_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_episode(dir.path()).is_err());
        std::fs::write(dir.path().join(META_FILE), "seed = 1\nbogus = 2\n").unwrap();
        assert!(read_episode(dir.path()).is_err());
        std::fs::write(
            dir.path().join(META_FILE),
            "seed = 1\nclasses = 0\nshots = 1\nqueries = 1\n",
        )
        .unwrap();
        let err = read_episode(dir.path()).unwrap_err().to_string();
        assert!(err.contains("support_c0_k0.pgm"), "{err}");
    }
}
