//! Seeded synthetic volumetric data and bit-exact volume serialization.
//!
//! Each sample is a cubic volume containing one to three tumor-like
//! ellipsoids: foreground voxels (inside any ellipsoid) take a high mean
//! intensity, background a low one, with additive Gaussian noise and a
//! final clip to [0, 1]. Sample `i` of a spec draws from ChaCha8 stream
//! `i`, so generation is pure per `(spec, seed, index)` and identical on
//! every platform.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::volume::{BinaryMask, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("split ratio must lie strictly inside (0,1), got {0}")]
    BadRatio(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad volume file: expected magic {expected}, found {found}")]
    BadMagic { expected: String, found: String },
    #[error("volume file truncated")]
    Truncated,
    #[error("volume file has trailing bytes")]
    TrailingBytes,
    #[error("volume file header invalid: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

const VOLUME_MAGIC: &[u8; 8] = b"FESSVOL1";
const MASK_MAGIC: &[u8; 8] = b"FESSMSK1";

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Cubic volume extent per axis; must be divisible by 4.
    pub extent: usize,
    pub min_ellipsoids: usize,
    pub max_ellipsoids: usize,
    /// Per-axis radius range in voxels.
    pub min_radius: f64,
    pub max_radius: f64,
    pub foreground_mean: f64,
    pub background_mean: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            extent: 16,
            min_ellipsoids: 1,
            max_ellipsoids: 3,
            min_radius: 2.0,
            max_radius: 5.0,
            foreground_mean: 0.8,
            background_mean: 0.2,
            noise_sigma: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.extent == 0 || self.extent % 4 != 0 {
            return Err(DataError::InfeasibleSpec(format!(
                "extent must be a positive multiple of 4, got {}",
                self.extent
            )));
        }
        if self.min_ellipsoids < 1 || self.min_ellipsoids > self.max_ellipsoids {
            return Err(DataError::InfeasibleSpec(format!(
                "ellipsoid count range [{}, {}] invalid",
                self.min_ellipsoids, self.max_ellipsoids
            )));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return Err(DataError::InfeasibleSpec(format!(
                "radius range [{}, {}] invalid",
                self.min_radius, self.max_radius
            )));
        }
        // Centers are drawn from [r, extent-1-r]; that interval must exist.
        let half_span = (self.extent - 1) as f64 / 2.0;
        if self.max_radius > half_span {
            return Err(DataError::InfeasibleSpec(format!(
                "radius {} exceeds half-extent {half_span}",
                self.max_radius
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::InfeasibleSpec(format!(
                "noise sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid: a voxel at integer coordinates `c` is inside
/// when `sum(((c - center) / radius)^2) <= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        let coords = [i as f64, j as f64, k as f64];
        let mut acc = 0.0;
        for a in 0..3 {
            let t = (coords[a] - self.center[a]) / self.radii[a];
            acc += t * t;
        }
        acc <= 1.0
    }
}

/// One image/mask pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Volume,
    pub mask: BinaryMask,
}

fn draw_ellipsoids(spec: &SyntheticSpec, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Ellipsoid> {
    let count = spec.min_ellipsoids
        + rng::index(rng, spec.max_ellipsoids - spec.min_ellipsoids + 1);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut radii = [0.0; 3];
        for r in &mut radii {
            *r = rng::uniform_in(rng, spec.min_radius, spec.max_radius);
        }
        let mut center = [0.0; 3];
        for a in 0..3 {
            let hi = (spec.extent - 1) as f64 - radii[a];
            center[a] = rng::uniform_in(rng, radii[a], hi);
        }
        out.push(Ellipsoid { center, radii });
    }
    out
}

/// The ellipsoids sample `index` of this spec will contain. Exposed so
/// tests can recompute masks independently.
pub fn sample_ellipsoids(spec: &SyntheticSpec, index: u64) -> Vec<Ellipsoid> {
    let mut rng = rng::seeded_stream(spec.seed, index);
    draw_ellipsoids(spec, &mut rng)
}

fn generate_one(spec: &SyntheticSpec, index: u64) -> Sample {
    // Shape draws come first, then one noise draw per voxel in row-major
    // order, all from the sample's own stream.
    let mut rng = rng::seeded_stream(spec.seed, index);
    let ellipsoids = draw_ellipsoids(spec, &mut rng);

    let e = spec.extent;
    let mut mask = vec![0.0; e * e * e];
    let mut image = vec![0.0; e * e * e];
    let mut flat = 0;
    for i in 0..e {
        for j in 0..e {
            for k in 0..e {
                let inside = ellipsoids.iter().any(|el| el.contains(i, j, k));
                mask[flat] = if inside { 1.0 } else { 0.0 };
                image[flat] = if inside {
                    spec.foreground_mean
                } else {
                    spec.background_mean
                };
                flat += 1;
            }
        }
    }
    let mut noise = vec![0.0; image.len()];
    rng::fill_normal(&mut rng, &mut noise);
    for (v, z) in image.iter_mut().zip(&noise) {
        *v = (*v + spec.noise_sigma * z).clamp(0.0, 1.0);
    }
    let shape = vec![e, e, e];
    let image = Volume::new(shape.clone(), image).expect("finite image");
    let mask = BinaryMask::from_volume(Volume::new(shape, mask).expect("binary mask"))
        .expect("mask is binary");
    debug_assert!({
        let fg = mask.foreground_count() as f64 / mask.as_volume().len() as f64;
        fg > 0.0 && fg < 0.5
    });
    Sample { image, mask }
}

/// Generates `count` samples, deterministic per `(spec, seed)`.
pub fn generate(spec: &SyntheticSpec, count: usize) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    if count == 0 {
        return Err(DataError::EmptyInput("generate needs count >= 1"));
    }
    Ok((0..count as u64)
        .into_par_iter()
        .map(|i| generate_one(spec, i))
        .collect())
}

/// Seeded shuffle followed by a `round(ratio * total)` split into
/// disjoint, exhaustive train/test sets.
pub fn split(
    samples: Vec<Sample>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>), DataError> {
    if samples.is_empty() {
        return Err(DataError::EmptyInput("split needs at least one sample"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::BadRatio(ratio));
    }
    let total = samples.len();
    let train_len = ((ratio * total as f64).round() as usize).min(total);
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = rng::seeded_stream(seed, u64::MAX);
    rng::shuffle(&mut rng, &mut order);
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut train = Vec::with_capacity(train_len);
    let mut test = Vec::with_capacity(total - train_len);
    for (pos, &idx) in order.iter().enumerate() {
        let sample = slots[idx].take().expect("each index visited once");
        if pos < train_len {
            train.push(sample);
        } else {
            test.push(sample);
        }
    }
    Ok((train, test))
}

fn write_payload(path: &Path, magic: &[u8; 8], v: &Volume) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(magic)?;
    w.write_all(&(v.rank() as u32).to_le_bytes())?;
    for &e in v.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &x in v.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_payload(path: &Path, magic: &[u8; 8]) -> Result<Volume, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut found = [0u8; 8];
    read_exact(&mut r, &mut found)?;
    if &found != magic {
        return Err(DataError::BadMagic {
            expected: String::from_utf8_lossy(magic).to_string(),
            found: String::from_utf8_lossy(&found).to_string(),
        });
    }
    let rank = read_u32(&mut r)? as usize;
    if rank > 5 {
        return Err(DataError::BadHeader(format!("rank {rank} out of range")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = read_u32(&mut r)? as usize;
        if e == 0 {
            return Err(DataError::BadHeader("zero extent".to_string()));
        }
        shape.push(e);
    }
    let count: usize = shape.iter().product();
    if count > 64 << 20 {
        return Err(DataError::BadHeader(format!(
            "implausible element count {count}"
        )));
    }
    let mut data = vec![0.0; count];
    for v in &mut data {
        let mut b = [0u8; 8];
        read_exact(&mut r, &mut b)?;
        *v = f64::from_le_bytes(b);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(DataError::TrailingBytes);
    }
    Ok(Volume::new(shape, data)?)
}

/// Writes a volume under magic `FESSVOL1`; round-trips bit-identically.
pub fn save_volume(path: &Path, v: &Volume) -> Result<(), DataError> {
    write_payload(path, VOLUME_MAGIC, v)
}

pub fn load_volume(path: &Path) -> Result<Volume, DataError> {
    read_payload(path, VOLUME_MAGIC)
}

/// Writes a mask under magic `FESSMSK1`; values restricted to {0, 1}.
pub fn save_mask(path: &Path, m: &BinaryMask) -> Result<(), DataError> {
    write_payload(path, MASK_MAGIC, m.as_volume())
}

pub fn load_mask(path: &Path) -> Result<BinaryMask, DataError> {
    Ok(BinaryMask::from_volume(read_payload(path, MASK_MAGIC)?)?)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), DataError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::Truncated
        } else {
            DataError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec, 4).unwrap();
        let b = generate(&spec, 4).unwrap();
        assert_eq!(a, b);
        let other = SyntheticSpec {
            seed: 1,
            ..SyntheticSpec::default()
        };
        assert_ne!(a, generate(&other, 4).unwrap());
    }

    #[test]
    fn zero_noise_gives_exactly_two_intensities() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            ..SyntheticSpec::default()
        };
        let samples = generate(&spec, 2).unwrap();
        for s in samples {
            for &v in s.image.data() {
                assert!(v == 0.8 || v == 0.2, "unexpected intensity {v}");
            }
        }
    }

    #[test]
    fn centered_sphere_matches_lattice_enumeration() {
        let extent = 16usize;
        let e = Ellipsoid {
            center: [7.5, 7.5, 7.5],
            radii: [2.0, 2.0, 2.0],
        };
        let mut oracle = 0usize;
        for i in 0..extent {
            for j in 0..extent {
                for k in 0..extent {
                    let d = [(i as f64 - 7.5) / 2.0, (j as f64 - 7.5) / 2.0, (k as f64 - 7.5) / 2.0];
                    if d.iter().map(|t| t * t).sum::<f64>() <= 1.0 {
                        oracle += 1;
                    }
                }
            }
        }
        let mut via_contains = 0usize;
        for i in 0..extent {
            for j in 0..extent {
                for k in 0..extent {
                    if e.contains(i, j, k) {
                        via_contains += 1;
                    }
                }
            }
        }
        assert_eq!(via_contains, oracle);
        assert!(oracle > 0);
    }

    #[test]
    fn masks_match_brute_force_membership_for_seeded_specs() {
        for seed in 0..20u64 {
            let spec = SyntheticSpec {
                seed,
                ..SyntheticSpec::default()
            };
            let samples = generate(&spec, 1).unwrap();
            let shapes = sample_ellipsoids(&spec, 0);
            let e = spec.extent;
            let mask = samples[0].mask.as_volume().data();
            let mut flat = 0;
            let mut fg = 0usize;
            for i in 0..e {
                for j in 0..e {
                    for k in 0..e {
                        let inside = shapes.iter().any(|el| {
                            let d = [
                                (i as f64 - el.center[0]) / el.radii[0],
                                (j as f64 - el.center[1]) / el.radii[1],
                                (k as f64 - el.center[2]) / el.radii[2],
                            ];
                            d.iter().map(|t| t * t).sum::<f64>() <= 1.0
                        });
                        assert_eq!(mask[flat] == 1.0, inside, "voxel ({i},{j},{k}) seed {seed}");
                        fg += inside as usize;
                        flat += 1;
                    }
                }
            }
            let frac = fg as f64 / (e * e * e) as f64;
            assert!(frac > 0.0 && frac < 0.5, "foreground fraction {frac}");
        }
    }

    #[test]
    fn split_examples() {
        let spec = SyntheticSpec::default();
        let ten = generate(&spec, 10).unwrap();
        let (train, test) = split(ten, 0.8, 3).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));

        let five = generate(&spec, 5).unwrap();
        let (train, test) = split(five, 0.8, 3).unwrap();
        assert_eq!((train.len(), test.len()), (4, 1));
    }

    #[test]
    fn split_is_a_partition() {
        let spec = SyntheticSpec::default();
        let samples = generate(&spec, 7).unwrap();
        let original = samples.clone();
        for ratio in [0.2, 0.5, 0.8] {
            let (train, test) = split(original.clone(), ratio, 11).unwrap();
            assert_eq!(train.len() + test.len(), original.len());
            let mut seen = vec![false; original.len()];
            for s in train.iter().chain(test.iter()) {
                let idx = original
                    .iter()
                    .position(|o| o == s)
                    .expect("sample came from the input");
                assert!(!seen[idx], "sample duplicated by split");
                seen[idx] = true;
            }
            assert!(seen.iter().all(|&v| v));
        }
        let _ = split(samples, 0.8, 11);
    }

    #[test]
    fn split_rejects_empty_and_bad_ratio() {
        assert!(matches!(
            split(Vec::new(), 0.8, 0),
            Err(DataError::EmptyInput(_))
        ));
        let spec = SyntheticSpec::default();
        let samples = generate(&spec, 2).unwrap();
        assert!(matches!(
            split(samples, 1.0, 0),
            Err(DataError::BadRatio(_))
        ));
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let too_big = SyntheticSpec {
            extent: 8,
            max_radius: 5.0,
            ..SyntheticSpec::default()
        };
        assert!(matches!(
            generate(&too_big, 1),
            Err(DataError::InfeasibleSpec(_))
        ));
        let odd = SyntheticSpec {
            extent: 10,
            ..SyntheticSpec::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn volume_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let v = Volume::new(
            vec![3, 2, 2],
            (0..12).map(|i| (i as f64 * 0.7).sin()).collect(),
        )
        .unwrap();
        save_volume(&path, &v).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(v, loaded);
        let raw_a = std::fs::read(&path).unwrap();
        save_volume(&path, &loaded).unwrap();
        let raw_b = std::fs::read(&path).unwrap();
        assert_eq!(raw_a, raw_b);
    }

    #[test]
    fn mask_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.msk");
        let m = BinaryMask::from_volume(
            Volume::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
        )
        .unwrap();
        save_mask(&path, &m).unwrap();
        assert_eq!(load_mask(&path).unwrap(), m);

        // A non-binary payload under the mask magic must be rejected.
        let bad = dir.path().join("bad.msk");
        write_payload(&bad, MASK_MAGIC, &Volume::new(vec![1], vec![0.5]).unwrap()).unwrap();
        assert!(load_mask(&bad).is_err());
    }

    #[test]
    fn corrupted_files_yield_structured_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let v = Volume::ones(&[4, 4]);
        save_volume(&path, &v).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = dir.path().join("t.vol");
        std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_volume(&truncated), Err(DataError::Truncated)));

        let wrong_magic = dir.path().join("w.vol");
        let mut corrupted = bytes.clone();
        corrupted[..8].copy_from_slice(b"NOTMAGIC");
        std::fs::write(&wrong_magic, &corrupted).unwrap();
        match load_volume(&wrong_magic) {
            Err(DataError::BadMagic { expected, .. }) => assert_eq!(expected, "FESSVOL1"),
            other => panic!("expected BadMagic, got {other:?}"),
        }

        let trailing = dir.path().join("x.vol");
        let mut extended = bytes;
        extended.push(0);
        std::fs::write(&trailing, &extended).unwrap();
        assert!(matches!(load_volume(&trailing), Err(DataError::TrailingBytes)));
    }
}
