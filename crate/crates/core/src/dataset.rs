//! On-disk phantom datasets: one binary file per patient plus a TOML index
//! assigning every patient to a train/val/test split.
//!
//! Patient file layout (little-endian):
//!
//! ```text
//! magic "TPFV" | version u32 | id_len u32 | id utf-8
//! depth u32 | height u32 | width u32 | flags u8 (bit0 AP, bit1 VP)
//! clinical 22 x f64
//! t1, ap, vp, hbp: D*H*W x f64 each
//! liver mask, tumor mask: D*H*W x u8 each
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{derive_seed, generate_patient, GeometryConfig, KineticsProfile};
use crate::volume::{Phase, PhaseVolume, Volume, CLINICAL_DIM};

const MAGIC: &[u8; 4] = b"TPFV";
const VERSION: u32 = 1;
pub const INDEX_FILE: &str = "dataset.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Relative sizes of the train/val/test partitions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 7,
            val: 2,
            test: 1,
        }
    }
}

impl SplitRatios {
    /// Partition sizes for `n` items: train and val are rounded to the
    /// nearest integer and test takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let total = (self.train + self.val + self.test).max(1) as f64;
        let train = ((n as f64) * self.train as f64 / total).round() as usize;
        let val = ((n as f64) * self.val as f64 / total).round() as usize;
        let train = train.min(n);
        let val = val.min(n - train);
        (train, val, n - train - val)
    }
}

/// Seeded shuffle of `ids` into splits.
pub fn assign_splits(ids: &[String], ratios: SplitRatios, seed: u64) -> Vec<(String, Split)> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, val, _) = ratios.counts(ids.len());
    let mut out: Vec<(String, Split)> = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            let split = if rank < train {
                Split::Train
            } else if rank < train + val {
                Split::Val
            } else {
                Split::Test
            };
            (ids[i].clone(), split)
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub split: Split,
    pub file: String,
}

/// Dataset manifest. Kept human readable; paths are relative to the
/// dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub depth: usize,
    pub size: usize,
    pub noise_std: f64,
    pub patients: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.patients
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.patients.iter().filter(|e| e.split == split).count()
    }
}

/// A dataset directory with its parsed index.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let index = read_index(&root.join(INDEX_FILE))?;
        Ok(Dataset { root, index })
    }

    pub fn load(&self, entry: &IndexEntry) -> Result<PhaseVolume> {
        read_patient(&self.root.join(&entry.file))
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.index.patients.iter().filter(move |e| e.split == split)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<PhaseVolume>> {
        self.entries(split).map(|e| self.load(e)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub patients: usize,
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub kinetics: KineticsProfile,
    pub ratios: SplitRatios,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            patients: 200,
            seed: 0,
            geometry: GeometryConfig::default(),
            kinetics: KineticsProfile::default(),
            ratios: SplitRatios::default(),
        }
    }
}

/// Generates patients in memory with their split assignment.
pub fn generate_patients(opts: &GenerateOptions) -> Result<Vec<(PhaseVolume, Split)>> {
    let mut volumes = Vec::with_capacity(opts.patients);
    for i in 0..opts.patients {
        let mut v = generate_patient(
            derive_seed(opts.seed, i as u64),
            &opts.geometry,
            &opts.kinetics,
        )?;
        v.patient_id = format!("P{i:04}");
        volumes.push(v);
    }
    let ids: Vec<String> = volumes.iter().map(|v| v.patient_id.clone()).collect();
    let splits = assign_splits(&ids, opts.ratios, opts.seed);
    Ok(volumes
        .into_iter()
        .zip(splits)
        .map(|(v, (_, s))| (v, s))
        .collect())
}

/// Generates a dataset and writes it to `out`.
pub fn generate_dataset(out: &Path, opts: &GenerateOptions) -> Result<Dataset> {
    let patients = generate_patients(opts)?;
    write_dataset(out, &patients, opts)
}

pub fn write_dataset(
    out: &Path,
    patients: &[(PhaseVolume, Split)],
    opts: &GenerateOptions,
) -> Result<Dataset> {
    fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(patients.len());
    for (v, split) in patients {
        let file = format!("{}.tpv", v.patient_id);
        write_patient(&out.join(&file), v)?;
        entries.push(IndexEntry {
            id: v.patient_id.clone(),
            split: *split,
            file,
        });
    }
    let index = DatasetIndex {
        seed: opts.seed,
        ratios: opts.ratios,
        depth: opts.geometry.depth,
        size: opts.geometry.size,
        noise_std: opts.kinetics.noise_std[0],
        patients: entries,
    };
    write_index(&out.join(INDEX_FILE), &index)?;
    Ok(Dataset {
        root: out.to_path_buf(),
        index,
    })
}

pub fn write_index(path: &Path, index: &DatasetIndex) -> Result<()> {
    let text = toml::to_string_pretty(index)
        .map_err(|e| Error::InvalidArgument(format!("serializing index: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path)?;
    let index: DatasetIndex = toml::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let mut seen = std::collections::HashSet::new();
    for e in &index.patients {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::parse(
                format!("{} patient {}", path.display(), e.id),
                "duplicate patient id",
            ));
        }
    }
    Ok(index)
}

pub fn encode_patient(v: &PhaseVolume) -> Vec<u8> {
    let [d, h, w] = v.shape();
    let n = d * h * w;
    let mut buf = Vec::with_capacity(64 + v.patient_id.len() + n * (4 * 8 + 2));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(v.patient_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(v.patient_id.as_bytes());
    for dim in [d, h, w] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.push(u8::from(v.ap_available) | (u8::from(v.vp_available) << 1));
    for c in v.clinical {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    for phase in Phase::ALL {
        for x in v.phase(phase).data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    for m in [&v.liver_mask, &v.tumor_mask] {
        buf.extend(m.data().iter().map(|&x| u8::from(x != 0.0)));
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                self.record,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_patient(bytes: &[u8], record: &str) -> Result<PhaseVolume> {
    let mut r = Reader {
        bytes,
        pos: 0,
        record,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::parse(record, "not a phase-volume file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(
            record,
            format!("unsupported version {version}"),
        ));
    }
    let id_len = r.u32("id length")? as usize;
    let patient_id = String::from_utf8(r.take(id_len, "patient id")?.to_vec())
        .map_err(|_| Error::parse(record, "patient id is not utf-8"))?;
    let shape = [
        r.u32("depth")? as usize,
        r.u32("height")? as usize,
        r.u32("width")? as usize,
    ];
    let n = shape.iter().product::<usize>();
    let flags = r.take(1, "flags")?[0];
    if flags > 3 {
        return Err(Error::parse(
            record,
            format!("invalid availability flags {flags}"),
        ));
    }
    let clinical: [f64; CLINICAL_DIM] = r
        .f64s(CLINICAL_DIM, "clinical vector")?
        .try_into()
        .expect("22 values");
    let mut phases = Vec::with_capacity(4);
    for phase in Phase::ALL {
        phases.push(Volume::new(shape, r.f64s(n, phase.label())?)?);
    }
    let mut masks = Vec::with_capacity(2);
    for name in ["liver mask", "tumor mask"] {
        let raw = r.take(n, name)?;
        if raw.iter().any(|&b| b > 1) {
            return Err(Error::parse(record, format!("{name} is not binary")));
        }
        masks.push(Volume::new(shape, raw.iter().map(|&b| b as f64).collect())?);
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(record, "trailing bytes after tumor mask"));
    }
    let mut phases = phases.into_iter();
    let mut masks = masks.into_iter();
    let v = PhaseVolume {
        patient_id,
        t1: phases.next().unwrap(),
        ap: phases.next().unwrap(),
        vp: phases.next().unwrap(),
        hbp: phases.next().unwrap(),
        ap_available: flags & 1 != 0,
        vp_available: flags & 2 != 0,
        liver_mask: masks.next().unwrap(),
        tumor_mask: masks.next().unwrap(),
        clinical,
    };
    v.validate()
        .map_err(|e| Error::parse(record, e.to_string()))?;
    Ok(v)
}

pub fn write_patient(path: &Path, v: &PhaseVolume) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_patient(v))?;
    Ok(())
}

pub fn read_patient(path: &Path) -> Result<PhaseVolume> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_patient(&bytes, &path.display().to_string())
}

/// Writes a single predicted volume (e.g. a synthesized HBP) as raw
/// little-endian `f64` with a `[D,H,W]` u32 header.
pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + v.data().len() * 8);
    for dim in v.shape() {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for x in v.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path)?;
    let record = path.display().to_string();
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        record: &record,
    };
    let shape = [
        r.u32("depth")? as usize,
        r.u32("height")? as usize,
        r.u32("width")? as usize,
    ];
    let data = r.f64s(shape.iter().product(), "voxels")?;
    Volume::new(shape, data)
}
