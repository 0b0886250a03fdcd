//! Cover/stego corpora: synthetic cover generation, seeded splitting,
//! stego generation and the manifest table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patch_graph::GrayImage;
use crate::pgm::{read_pgm, write_pgm};
use crate::stego::{cost_map, counter_hash, simulate_embedding, total_entropy, Algorithm, EmbeddingConfig, ENTROPY_TOLERANCE};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_COLUMNS: [&str; 7] = ["path", "role", "split", "seed", "payload", "algorithm", "lambda"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Cover,
    Stego,
}

impl Role {
    /// Class label: 0 for cover, 1 for stego.
    pub fn label(self) -> usize {
        match self {
            Self::Cover => 0,
            Self::Stego => 1,
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cover" => Ok(Self::Cover),
            "stego" => Ok(Self::Stego),
            other => Err(Error::Manifest(format!("unknown role {other:?}"))),
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cover => "cover",
            Self::Stego => "stego",
        })
    }
}

/// One image of the corpus. Cover rows carry payload 0, algorithm `none`
/// and lambda 0; the seed is the one used for the paired stego.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub role: Role,
    pub split: Split,
    pub seed: u64,
    pub payload: f64,
    pub algorithm: Option<Algorithm>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = MANIFEST_COLUMNS.join("\t");
        s.push('\n');
        for e in &self.entries {
            let algo = e.algorithm.map_or_else(|| "none".to_string(), |a| a.to_string());
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.path.display(),
                e.role,
                e.split,
                e.seed,
                e.payload,
                algo,
                e.lambda
            )
            .expect("writing to a String cannot fail");
        }
        s
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Manifest("empty manifest".into()))?;
        if header.split('\t').collect::<Vec<_>>() != MANIFEST_COLUMNS {
            return Err(Error::Manifest(format!("unexpected header {header:?}")));
        }
        let mut entries = Vec::new();
        for (no, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != MANIFEST_COLUMNS.len() {
                return Err(Error::Manifest(format!("line {}: expected 7 fields", no + 2)));
            }
            let bad = |what: &str| Error::Manifest(format!("line {}: bad {what}", no + 2));
            entries.push(ManifestEntry {
                path: PathBuf::from(f[0]),
                role: f[1].parse()?,
                split: f[2].parse().map_err(|_| bad("split"))?,
                seed: f[3].parse().map_err(|_| bad("seed"))?,
                payload: f[4].parse().map_err(|_| bad("payload"))?,
                algorithm: match f[5] {
                    "none" => None,
                    a => Some(a.parse().map_err(|_| bad("algorithm"))?),
                },
                lambda: f[6].parse().map_err(|_| bad("lambda"))?,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// Pair counts per split for `total` pairs under `ratios` (train, val, test);
/// test absorbs the rounding remainder.
pub fn split_counts(total: usize, ratios: [u32; 3]) -> Result<[usize; 3]> {
    let sum: u32 = ratios.iter().sum();
    if sum == 0 {
        return Err(Error::Config("split ratios sum to zero".into()));
    }
    let share = |r: u32| ((total as u64 * r as u64 * 2 + sum as u64) / (2 * sum as u64)) as usize;
    let train = share(ratios[0]);
    let val = share(ratios[1]).min(total - train);
    Ok([train, val, total - train - val])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub payload: f64,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub ratios: [u32; 3],
}

impl DatasetConfig {
    pub fn new(payload: f64, algorithm: Algorithm, seed: u64) -> Self {
        Self {
            payload,
            algorithm,
            seed,
            ratios: [40, 10, 50],
        }
    }
}

/// Sorted `.pgm` files of a directory.
pub fn list_pgm(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort();
    Ok(files)
}

/// Build a cover/stego corpus under `out_dir` (`cover/`, `stego/`, manifest).
///
/// Each cover's stego seed is derived from the master seed and the cover's
/// position in name order; pairs are assigned to splits by a seeded shuffle.
pub fn make_dataset(cover_dir: &Path, config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    EmbeddingConfig {
        payload: config.payload,
        algorithm: config.algorithm,
        seed: config.seed,
    }
    .validate()?;
    let files = list_pgm(cover_dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no .pgm covers in {}", cover_dir.display())));
    }
    let covers = files.iter().map(|p| read_pgm(p)).collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..files.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let [train, val, _] = split_counts(files.len(), config.ratios)?;
    let mut split_of = vec![Split::Test; files.len()];
    for (rank, &i) in order.iter().enumerate() {
        split_of[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }

    std::fs::create_dir_all(out_dir.join("cover"))?;
    std::fs::create_dir_all(out_dir.join("stego"))?;
    let mut entries = Vec::with_capacity(2 * files.len());
    for (i, (file, cover)) in files.iter().zip(&covers).enumerate() {
        let name = file.file_name().expect("listed files have names");
        let seed = counter_hash(config.seed, i as u64);
        let rho = cost_map(cover, config.algorithm)?;
        let emb = simulate_embedding(cover, &rho, config.payload, seed)?;
        let target = config.payload * rho.rho.len() as f64;
        let realized = total_entropy(&rho, emb.lambda);
        if ((realized - target) / target).abs() >= ENTROPY_TOLERANCE {
            return Err(Error::Config(format!(
                "{}: realized entropy {realized} misses target {target}",
                file.display()
            )));
        }
        let cover_rel = Path::new("cover").join(name);
        let stego_rel = Path::new("stego").join(name);
        write_pgm(&out_dir.join(&cover_rel), cover)?;
        write_pgm(&out_dir.join(&stego_rel), &emb.stego)?;
        entries.push(ManifestEntry {
            path: cover_rel,
            role: Role::Cover,
            split: split_of[i],
            seed,
            payload: 0.0,
            algorithm: None,
            lambda: 0.0,
        });
        entries.push(ManifestEntry {
            path: stego_rel,
            role: Role::Stego,
            split: split_of[i],
            seed,
            payload: config.payload,
            algorithm: Some(config.algorithm),
            lambda: emb.lambda,
        });
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// A smooth synthetic cover: a few low-frequency gratings over a random
/// base level plus uniform noise whose amplitude varies across the image, so
/// both flat and textured regions occur.
pub fn synthesize_cover(height: usize, width: usize, seed: u64) -> GrayImage {
    use std::f64::consts::TAU;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = rng.gen_range(70.0..185.0);
    let gratings: Vec<(f64, f64, f64, f64)> = (0..5)
        .map(|_| {
            let (mut fx, mut fy) = (0, 0);
            while fx == 0 && fy == 0 {
                fx = rng.gen_range(0..=3);
                fy = rng.gen_range(0..=3);
            }
            (rng.gen_range(4.0..14.0), fx as f64, fy as f64, rng.gen_range(0.0..TAU))
        })
        .collect();
    let noise_peak = rng.gen_range(0.0..1.0);
    let (gx, gy, psi) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.0..TAU));
    let mut pixels = Vec::with_capacity(height * width);
    for y in 0..height {
        let v = y as f64 / height as f64;
        for x in 0..width {
            let u = x as f64 / width as f64;
            let mut value = base;
            for &(a, fx, fy, phase) in &gratings {
                value += a * (TAU * (fx * u + fy * v) + phase).cos();
            }
            let sigma = noise_peak * 0.5 * (1.0 + (TAU * (gx * u + gy * v) + psi).cos());
            value += sigma * 3f64.sqrt() * rng.gen_range(-1.0..1.0);
            pixels.push(value.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(height, width, pixels).expect("buffer matches dimensions")
}

/// Write `count` synthetic covers named `cover_NNNN.pgm` into `dir`.
pub fn write_synthetic_covers(dir: &Path, count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("cover_{i:04}.pgm"));
            write_pgm(&path, &synthesize_cover(height, width, counter_hash(seed, i as u64)))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_counts(20, [40, 10, 50]).unwrap(), [8, 2, 10]);
        assert_eq!(split_counts(350, [4, 1, 2]).unwrap(), [200, 50, 100]);
        assert_eq!(split_counts(10_000, [40, 10, 50]).unwrap(), [4000, 1000, 5000]);
        assert_eq!(split_counts(1, [40, 10, 50]).unwrap().iter().sum::<usize>(), 1);
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = Manifest {
            root: PathBuf::from("/x"),
            entries: vec![ManifestEntry {
                path: "stego/a.pgm".into(),
                role: Role::Stego,
                split: Split::Val,
                seed: u64::MAX,
                payload: 0.4,
                algorithm: Some(Algorithm::Hill),
                lambda: 12.345678901234567,
            }],
        };
        assert_eq!(Manifest::parse(&m.to_text(), Path::new("/x")).unwrap(), m);
    }

    #[test]
    fn synthetic_covers_are_deterministic() {
        assert_eq!(synthesize_cover(32, 32, 5), synthesize_cover(32, 32, 5));
        assert_ne!(synthesize_cover(32, 32, 5), synthesize_cover(32, 32, 6));
    }
}
