//! Blinded reader study: paired real/synthetic images per patient, reader
//! sessions, an append-only decision log and percentage summaries.
//!
//! Nothing handed to a client (session ids, case tokens, payload fields)
//! is derived from which side holds the real image; only the pixels differ.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::select_lesion_slices;
use crate::model::TriPfNet;
use crate::phantom::derive_seed;
use crate::volume::{PhaseVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyMode {
    TwoCategory,
    ThreeCategory,
}

impl std::str::FromStr for StudyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_category" => Ok(StudyMode::TwoCategory),
            "three_category" => Ok(StudyMode::ThreeCategory),
            other => Err(Error::InvalidArgument(format!("unknown study mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Left,
    Right,
    Similar,
}

/// What a choice means once the hidden assignment is known.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolved {
    Real,
    Gen,
    Similar,
}

pub fn resolve(choice: Choice, left_is_real: bool) -> Resolved {
    match (choice, left_is_real) {
        (Choice::Similar, _) => Resolved::Similar,
        (Choice::Left, true) | (Choice::Right, false) => Resolved::Real,
        (Choice::Left, false) | (Choice::Right, true) => Resolved::Gen,
    }
}

/// 16-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
}

impl Raster {
    /// Quantizes `[0, 1]` intensities (clamped) to 16 bits.
    pub fn from_unit(values: &[f64], height: usize, width: usize) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("raster", format!("{height}x{width} vs {}", values.len())));
        }
        Ok(Raster {
            width,
            height,
            pixels: values
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                .collect(),
        })
    }
}

/// One patient's image pair.
#[derive(Clone, Debug)]
pub struct StudyCase {
    pub patient_id: String,
    pub slice: usize,
    pub real: Raster,
    pub synthetic: Raster,
}

/// The cases available to every session.
#[derive(Clone, Debug, Default)]
pub struct CaseBank {
    pub cases: Vec<StudyCase>,
}

impl CaseBank {
    /// Pairs each real HBP volume with a synthesized one, showing the
    /// largest-tumor slice. Patients without a synthesized volume are
    /// reported together in one error.
    pub fn from_pairs(
        volumes: &[PhaseVolume],
        synthesized: &HashMap<String, Volume>,
    ) -> Result<Self> {
        let missing: Vec<&str> = volumes
            .iter()
            .filter(|v| !synthesized.contains_key(&v.patient_id))
            .map(|v| v.patient_id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no synthesized image for patients: {}",
                missing.join(", ")
            )));
        }
        let mut cases = Vec::with_capacity(volumes.len());
        for v in volumes {
            let syn = &synthesized[&v.patient_id];
            if syn.shape() != v.hbp.shape() {
                return Err(Error::shape(
                    "study case",
                    format!("{}: synthesized {:?} vs real {:?}", v.patient_id, syn.shape(), v.hbp.shape()),
                ));
            }
            let slice = select_lesion_slices(&v.tumor_mask)?.center;
            let [_, h, w] = v.shape();
            cases.push(StudyCase {
                patient_id: v.patient_id.clone(),
                slice,
                real: Raster::from_unit(v.hbp.slice(slice), h, w)?,
                synthetic: Raster::from_unit(syn.slice(slice), h, w)?,
            });
        }
        Ok(CaseBank { cases })
    }

    /// Synthesizes the representative slice of every volume with `net`.
    pub fn synthesize(net: &TriPfNet, volumes: &[PhaseVolume]) -> Result<Self> {
        let mut cases = Vec::with_capacity(volumes.len());
        let mut failed = Vec::new();
        for v in volumes {
            let slice = select_lesion_slices(&v.tumor_mask)?.center;
            match net.synthesize(v, slice) {
                Ok(pred) => {
                    let [_, h, w] = v.shape();
                    cases.push(StudyCase {
                        patient_id: v.patient_id.clone(),
                        slice,
                        real: Raster::from_unit(v.hbp.slice(slice), h, w)?,
                        synthetic: Raster::from_unit(pred.data(), h, w)?,
                    });
                }
                Err(e) => failed.push(format!("{} ({e})", v.patient_id)),
            }
        }
        if !failed.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "could not synthesize images for patients: {}",
                failed.join(", ")
            )));
        }
        Ok(CaseBank { cases })
    }
}

/// One reader's pass over the case bank.
#[derive(Clone, Debug)]
pub struct StudySession {
    pub session_id: String,
    pub reader_id: String,
    pub mode: StudyMode,
    /// Case-bank indices in presentation order.
    pub order: Vec<usize>,
    /// Hidden per-position assignment.
    pub left_is_real: Vec<bool>,
    tokens: Vec<String>,
    pub cursor: usize,
}

fn hex_token(rng: &mut ChaCha8Rng) -> String {
    let a: u64 = rng.random();
    let b: u64 = rng.random();
    format!("{a:016x}{b:016x}")
}

impl StudySession {
    /// Case order, left/right assignment and case tokens each come from
    /// their own stream derived from `seed`.
    pub fn new(
        session_id: String,
        reader_id: &str,
        mode: StudyMode,
        n_cases: usize,
        seed: u64,
    ) -> Result<Self> {
        if reader_id.trim().is_empty() {
            return Err(Error::InvalidArgument("reader id must not be empty".into()));
        }
        if n_cases == 0 {
            return Err(Error::InvalidArgument("no cases to present".into()));
        }
        let mut order: Vec<usize> = (0..n_cases).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)));
        let mut lr = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
        let left_is_real = (0..n_cases).map(|_| lr.random_bool(0.5)).collect();
        let mut tk = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
        let tokens = (0..n_cases).map(|_| hex_token(&mut tk)).collect();
        Ok(StudySession {
            session_id,
            reader_id: reader_id.to_string(),
            mode,
            order,
            left_is_real,
            tokens,
            cursor: 0,
        })
    }

    pub fn total(&self) -> usize {
        self.order.len()
    }

    pub fn is_complete(&self) -> bool {
        self.cursor >= self.order.len()
    }

    pub fn current_token(&self) -> Option<&str> {
        self.tokens.get(self.cursor).map(String::as_str)
    }
}

/// What the client sees for one case.
#[derive(Clone, Debug)]
pub struct CaseView<'a> {
    pub token: &'a str,
    pub mode: StudyMode,
    /// 0-based position and total, for progress display.
    pub position: usize,
    pub total: usize,
    pub left: &'a Raster,
    pub right: &'a Raster,
}

/// One reader decision as stored in the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub session_id: String,
    pub reader_id: String,
    pub mode: StudyMode,
    pub patient_id: String,
    pub position: usize,
    pub left_is_real: bool,
    pub choice: Choice,
    pub resolved: Resolved,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

/// Append-only JSON-lines log. Each record is written as one line and
/// synced before the append returns.
pub struct StudyLog {
    path: PathBuf,
    file: File,
}

impl StudyLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(StudyLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, rec: &StudyRecord) -> Result<()> {
        let mut line = serde_json::to_string(rec).expect("record serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        Ok(())
    }
}

/// Reads every record of a log; a malformed line is a parse error naming
/// the line number.
pub fn read_log(path: &Path) -> Result<Vec<StudyRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            Error::parse(format!("{}:{}", path.display(), i + 1), e.to_string())
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Study state shared by all sessions of one server.
pub struct StudyService {
    bank: CaseBank,
    sessions: HashMap<String, StudySession>,
    log: StudyLog,
    created: u64,
}

impl StudyService {
    pub fn new(bank: CaseBank, log: StudyLog) -> Result<Self> {
        if bank.cases.is_empty() {
            return Err(Error::InvalidArgument("case bank is empty".into()));
        }
        Ok(StudyService {
            bank,
            sessions: HashMap::new(),
            log,
            created: 0,
        })
    }

    pub fn bank(&self) -> &CaseBank {
        &self.bank
    }

    pub fn log_path(&self) -> &Path {
        self.log.path()
    }

    pub fn create_session(&mut self, reader_id: &str, mode: StudyMode, seed: u64) -> Result<&StudySession> {
        self.created += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + self.created));
        let id = format!("s{:04}-{:08x}", self.created, rng.random::<u32>());
        let session = StudySession::new(id.clone(), reader_id, mode, self.bank.cases.len(), seed)?;
        self.sessions.insert(id.clone(), session);
        Ok(&self.sessions[&id])
    }

    pub fn session(&self, id: &str) -> Result<&StudySession> {
        self.sessions
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown session {id:?}")))
    }

    /// The current case, or `None` when the session is finished. Calling
    /// it repeatedly without answering returns the same case.
    pub fn next_case(&self, session_id: &str) -> Result<Option<CaseView<'_>>> {
        let s = self.session(session_id)?;
        if s.is_complete() {
            return Ok(None);
        }
        let case = &self.bank.cases[s.order[s.cursor]];
        let (left, right) = if s.left_is_real[s.cursor] {
            (&case.real, &case.synthetic)
        } else {
            (&case.synthetic, &case.real)
        };
        Ok(Some(CaseView {
            token: &s.tokens[s.cursor],
            mode: s.mode,
            position: s.cursor,
            total: s.total(),
            left,
            right,
        }))
    }

    /// Records a decision for the current case. Stale or unknown tokens and
    /// choices not offered in the session's mode are rejected without
    /// touching the cursor or the log.
    pub fn submit(&mut self, session_id: &str, token: &str, choice: Choice, timestamp_ms: u64) -> Result<StudyRecord> {
        let s = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown session {session_id:?}")))?;
        if s.is_complete() {
            return Err(Error::InvalidArgument("session is already complete".into()));
        }
        if s.tokens[s.cursor] != token {
            return Err(Error::InvalidArgument("stale or unknown case token".into()));
        }
        if choice == Choice::Similar && s.mode == StudyMode::TwoCategory {
            return Err(Error::InvalidArgument(
                "'similar' is not a valid choice in two-category mode".into(),
            ));
        }
        let left_is_real = s.left_is_real[s.cursor];
        let rec = StudyRecord {
            session_id: s.session_id.clone(),
            reader_id: s.reader_id.clone(),
            mode: s.mode,
            patient_id: self.bank.cases[s.order[s.cursor]].patient_id.clone(),
            position: s.cursor,
            left_is_real,
            choice,
            resolved: resolve(choice, left_is_real),
            timestamp_ms,
        };
        self.log.append(&rec)?;
        s.cursor += 1;
        Ok(rec)
    }

    /// Summary over the log, leaving out sessions that are still in
    /// progress: a reader who could watch the counts move after each
    /// answer would learn which side was real.
    pub fn summary(&self) -> Result<Vec<ReaderSummary>> {
        let records: Vec<StudyRecord> = read_log(self.log.path())?
            .into_iter()
            .filter(|r| self.sessions.get(&r.session_id).is_none_or(StudySession::is_complete))
            .collect();
        Ok(summarize(&records))
    }
}

/// Choice percentages of one reader in one mode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReaderSummary {
    pub reader_id: String,
    pub mode: StudyMode,
    pub total: usize,
    pub real: usize,
    pub gen: usize,
    pub similar: usize,
    pub pct_real: f64,
    pub pct_gen: f64,
    pub pct_similar: f64,
}

/// Per reader and mode, the share of decisions for the real image, the
/// synthetic image and (three-category mode) "similar quality". Readers
/// are ordered by id, then mode.
pub fn summarize(records: &[StudyRecord]) -> Vec<ReaderSummary> {
    let mut counts: BTreeMap<(String, StudyMode), [usize; 3]> = BTreeMap::new();
    for r in records {
        let c = counts.entry((r.reader_id.clone(), r.mode)).or_default();
        c[match r.resolved {
            Resolved::Real => 0,
            Resolved::Gen => 1,
            Resolved::Similar => 2,
        }] += 1;
    }
    counts
        .into_iter()
        .map(|((reader_id, mode), [real, gen, similar])| {
            let total = real + gen + similar;
            let pct = |k: usize| 100.0 * k as f64 / total as f64;
            ReaderSummary {
                reader_id,
                mode,
                total,
                real,
                gen,
                similar,
                pct_real: pct(real),
                pct_gen: pct(gen),
                pct_similar: pct(similar),
            }
        })
        .collect()
}

/// Two-decimal percentage.
pub fn format_pct(p: f64) -> String {
    format!("{p:.2}%")
}

/// Plain-text table of reader percentages, one block per mode.
pub fn summary_table(rows: &[ReaderSummary]) -> String {
    let mut s = String::new();
    for mode in [StudyMode::TwoCategory, StudyMode::ThreeCategory] {
        let block: Vec<&ReaderSummary> = rows.iter().filter(|r| r.mode == mode).collect();
        if block.is_empty() {
            continue;
        }
        match mode {
            StudyMode::TwoCategory => {
                let _ = writeln!(s, "Two-category test");
                let _ = writeln!(s, "{:<20} {:>12} {:>12} {:>6}", "Reader", "chose Real", "chose gan", "n");
                for r in block {
                    let _ = writeln!(
                        s,
                        "{:<20} {:>12} {:>12} {:>6}",
                        r.reader_id,
                        format_pct(r.pct_real),
                        format_pct(r.pct_gen),
                        r.total
                    );
                }
            }
            StudyMode::ThreeCategory => {
                let _ = writeln!(s, "Three-category test");
                let _ = writeln!(
                    s,
                    "{:<20} {:>12} {:>12} {:>16} {:>6}",
                    "Reader", "chose Real", "chose gan", "Similar quality", "n"
                );
                for r in block {
                    let _ = writeln!(
                        s,
                        "{:<20} {:>12} {:>12} {:>16} {:>6}",
                        r.reader_id,
                        format_pct(r.pct_real),
                        format_pct(r.pct_gen),
                        format_pct(r.pct_similar),
                        r.total
                    );
                }
            }
        }
        s.push('\n');
    }
    if s.is_empty() {
        s.push_str("no study records\n");
    }
    s
}
