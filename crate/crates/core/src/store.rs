//! Checkpoint storage of primal trajectories: written forward during the primal
//! solve, read strictly backwards by the adjoint sweep.
//!
//! File layout (all little endian):
//!
//! ```text
//! "ADJK" | version u32 | N_u u64 | s u32 | N_t u64 | t_0 .. t_Nt (f64)
//! u^(0) | k_1^(1) .. k_s^(1) u^(1) | ... | k_1^(Nt) .. k_s^(Nt) u^(Nt)
//! ```
//!
//! Every record holds `N_u` f64 values, so the offset of any slot is a closed
//! formula and reverse reads need no index.

use std::fs::File;
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::system::Vector;

pub const MAGIC: [u8; 4] = *b"ADJK";
pub const FORMAT_VERSION: u32 = 1;
/// Bytes before the time grid.
const FIXED_HEADER: u64 = 4 + 4 + 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error at {slot}: {source}")]
    Io {
        slot: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("header field {field} is {found}, expected {expected}")]
    HeaderMismatch { field: &'static str, expected: u64, found: u64 },
    #[error("time grid differs from the requesting run at t_{index}")]
    GridMismatch { index: usize },
    #[error("file is {found} bytes, layout requires {expected}")]
    Truncated { expected: u64, found: u64 },
    #[error("slot {got} written out of order (expected {expected})")]
    OutOfOrder { expected: String, got: String },
    #[error("record length {found} does not match N_u = {expected}")]
    RecordLength { expected: usize, found: usize },
    #[error("trajectory incomplete: {0}")]
    Incomplete(String),
    #[error("reverse access violated: {0}")]
    NotReverse(String),
}

/// Position of a record in the forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Initial,
    /// Stage `stage` (zero based) of step `step` (one based).
    Stage { step: usize, stage: usize },
    /// State `u^(step)` after step `step >= 1`.
    State { step: usize },
}

impl Slot {
    /// Record index in the forward order for an `s`-stage scheme.
    pub fn record_index(self, s: usize) -> u64 {
        let s = s as u64;
        match self {
            Slot::Initial => 0,
            Slot::Stage { step, stage } => 1 + (step as u64 - 1) * (s + 1) + stage as u64,
            Slot::State { step } => 1 + (step as u64 - 1) * (s + 1) + s,
        }
    }

    /// Inverse of [`Slot::record_index`].
    pub fn from_index(index: u64, s: usize) -> Slot {
        if index == 0 {
            return Slot::Initial;
        }
        let s1 = s as u64 + 1;
        let step = ((index - 1) / s1 + 1) as usize;
        let within = ((index - 1) % s1) as usize;
        if within == s {
            Slot::State { step }
        } else {
            Slot::Stage { step, stage: within }
        }
    }

    /// State slot holding `u^(n)`.
    pub fn state(n: usize) -> Slot {
        if n == 0 {
            Slot::Initial
        } else {
            Slot::State { step: n }
        }
    }
}

impl std::fmt::Display for Slot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Slot::Initial => write!(f, "u^(0)"),
            Slot::Stage { step, stage } => write!(f, "k_{}^({})", stage + 1, step),
            Slot::State { step } => write!(f, "u^({step})"),
        }
    }
}

/// Shape of a stored trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub n_u: usize,
    pub stages: usize,
    pub grid: Vec<f64>,
}

impl Layout {
    pub fn n_steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn n_records(&self) -> u64 {
        1 + self.n_steps() as u64 * (self.stages as u64 + 1)
    }

    pub fn header_len(&self) -> u64 {
        FIXED_HEADER + 8 * self.grid.len() as u64
    }

    pub fn record_len(&self) -> u64 {
        8 * self.n_u as u64
    }

    pub fn file_len(&self) -> u64 {
        self.header_len() + self.n_records() * self.record_len()
    }

    pub fn offset(&self, slot: Slot) -> u64 {
        self.header_len() + slot.record_index(self.stages) * self.record_len()
    }

    /// Checks that a stored layout matches the run requesting it.
    pub fn check_matches(&self, expected: &Layout) -> Result<(), StoreError> {
        let fields = [
            ("N_u", expected.n_u as u64, self.n_u as u64),
            ("s", expected.stages as u64, self.stages as u64),
            ("N_t", expected.n_steps() as u64, self.n_steps() as u64),
        ];
        for (field, e, f) in fields {
            if e != f {
                return Err(StoreError::HeaderMismatch { field, expected: e, found: f });
            }
        }
        for (index, (a, b)) in self.grid.iter().zip(&expected.grid).enumerate() {
            if a.to_bits() != b.to_bits() {
                return Err(StoreError::GridMismatch { index });
            }
        }
        Ok(())
    }
}

/// Receiver of the primal trajectory in forward order.
pub trait TrajectorySink {
    fn begin(&mut self, layout: &Layout) -> Result<(), StoreError>;
    fn write(&mut self, slot: Slot, data: &Vector) -> Result<(), StoreError>;
    fn finish(&mut self) -> Result<(), StoreError>;
}

/// Discards everything; used for primal runs whose trajectory is not needed.
#[derive(Debug, Default)]
pub struct NullSink;

impl TrajectorySink for NullSink {
    fn begin(&mut self, _: &Layout) -> Result<(), StoreError> {
        Ok(())
    }
    fn write(&mut self, _: Slot, _: &Vector) -> Result<(), StoreError> {
        Ok(())
    }
    fn finish(&mut self) -> Result<(), StoreError> {
        Ok(())
    }
}

/// Data of one step as consumed by the adjoint sweep.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub u_prev: Vector,
    /// `k_1 .. k_s` in stage order.
    pub stages: Vec<Vector>,
}

/// Reverse access to a stored trajectory: first `u^(N_t)`, then step records for
/// `n = N_t, ..., 1`.
pub trait ReverseTrajectory {
    fn layout(&self) -> &Layout;
    fn final_state(&mut self) -> Result<Vector, StoreError>;
    fn step(&mut self, n: usize) -> Result<StepRecord, StoreError>;
}

/// Checks a forward write against the expected next slot.
fn check_order(next: u64, slot: Slot, s: usize) -> Result<(), StoreError> {
    let got = slot.record_index(s);
    if got != next {
        return Err(StoreError::OutOfOrder {
            expected: Slot::from_index(next, s).to_string(),
            got: slot.to_string(),
        });
    }
    Ok(())
}

/// Writes a checkpoint file in forward order.
pub struct CheckpointWriter {
    path: PathBuf,
    out: BufWriter<File>,
    layout: Option<Layout>,
    next: u64,
}

impl CheckpointWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|source| StoreError::Io { slot: "create".into(), source })?;
        Ok(Self { path, out: BufWriter::new(file), layout: None, next: 0 })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn io(slot: impl std::fmt::Display) -> impl FnOnce(io::Error) -> StoreError {
        let slot = slot.to_string();
        move |source| StoreError::Io { slot, source }
    }
}

impl TrajectorySink for CheckpointWriter {
    fn begin(&mut self, layout: &Layout) -> Result<(), StoreError> {
        let mut header = Vec::with_capacity(layout.header_len() as usize);
        header.extend_from_slice(&MAGIC);
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        header.extend_from_slice(&(layout.n_u as u64).to_le_bytes());
        header.extend_from_slice(&(layout.stages as u32).to_le_bytes());
        header.extend_from_slice(&(layout.n_steps() as u64).to_le_bytes());
        for t in &layout.grid {
            header.extend_from_slice(&t.to_le_bytes());
        }
        self.out.write_all(&header).map_err(Self::io("header"))?;
        self.layout = Some(layout.clone());
        self.next = 0;
        Ok(())
    }

    fn write(&mut self, slot: Slot, data: &Vector) -> Result<(), StoreError> {
        let layout = self
            .layout
            .as_ref()
            .ok_or_else(|| StoreError::Incomplete("write before header".into()))?;
        check_order(self.next, slot, layout.stages)?;
        if data.len() != layout.n_u {
            return Err(StoreError::RecordLength { expected: layout.n_u, found: data.len() });
        }
        let mut buf = Vec::with_capacity(8 * data.len());
        for v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.out.write_all(&buf).map_err(Self::io(slot))?;
        self.next += 1;
        Ok(())
    }

    fn finish(&mut self) -> Result<(), StoreError> {
        let layout = self
            .layout
            .as_ref()
            .ok_or_else(|| StoreError::Incomplete("no header written".into()))?;
        if self.next != layout.n_records() {
            return Err(StoreError::Incomplete(format!(
                "{} of {} records written",
                self.next,
                layout.n_records()
            )));
        }
        self.out.flush().map_err(Self::io("flush"))?;
        self.out.get_ref().sync_data().map_err(Self::io("sync"))?;
        Ok(())
    }
}

/// Reads a checkpoint file. Reverse access through [`ReverseTrajectory`] asserts
/// strictly descending offsets.
pub struct CheckpointReader {
    file: File,
    layout: Layout,
    last_offset: Option<u64>,
    next_step: Option<usize>,
}

impl CheckpointReader {
    /// Opens a file and validates its header and length.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let io = |what: &str| {
            let slot = what.to_string();
            move |source| StoreError::Io { slot, source }
        };
        let mut file = File::open(path.as_ref()).map_err(io("open"))?;
        let found = file.metadata().map_err(io("metadata"))?.len();
        if found < FIXED_HEADER {
            return Err(StoreError::Truncated { expected: FIXED_HEADER, found });
        }
        let mut fixed = [0u8; FIXED_HEADER as usize];
        file.read_exact(&mut fixed).map_err(io("header"))?;
        let magic: [u8; 4] = fixed[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(StoreError::Version { found: version });
        }
        let n_u = u64::from_le_bytes(fixed[8..16].try_into().unwrap()) as usize;
        let stages = u32::from_le_bytes(fixed[16..20].try_into().unwrap()) as usize;
        let n_t = u64::from_le_bytes(fixed[20..28].try_into().unwrap()) as usize;
        let grid_bytes = 8 * (n_t as u64 + 1);
        if found < FIXED_HEADER + grid_bytes {
            return Err(StoreError::Truncated { expected: FIXED_HEADER + grid_bytes, found });
        }
        let mut raw = vec![0u8; grid_bytes as usize];
        file.read_exact(&mut raw).map_err(io("grid"))?;
        let grid = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let layout = Layout { n_u, stages, grid };
        if found != layout.file_len() {
            return Err(StoreError::Truncated { expected: layout.file_len(), found });
        }
        Ok(Self { file, layout, last_offset: None, next_step: None })
    }

    /// Opens a file and checks it against the layout of the requesting run.
    pub fn open_expecting(path: impl AsRef<Path>, expected: &Layout) -> Result<Self, StoreError> {
        let reader = Self::open(path)?;
        reader.layout.check_matches(expected)?;
        Ok(reader)
    }

    /// Random access to any record. Does not take part in the reverse-order check.
    pub fn read_slot(&mut self, slot: Slot) -> Result<Vector, StoreError> {
        let offset = self.layout.offset(slot);
        self.read_at(offset, slot)
    }

    fn read_at(&mut self, offset: u64, slot: Slot) -> Result<Vector, StoreError> {
        let io = |source| StoreError::Io { slot: slot.to_string(), source };
        self.file.seek(SeekFrom::Start(offset)).map_err(io)?;
        let mut raw = vec![0u8; self.layout.record_len() as usize];
        self.file.read_exact(&mut raw).map_err(|source| StoreError::Io { slot: slot.to_string(), source })?;
        Ok(Vector::from_iterator(
            self.layout.n_u,
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        ))
    }

    fn read_reverse_slot(&mut self, slot: Slot) -> Result<Vector, StoreError> {
        let offset = self.layout.offset(slot);
        if let Some(last) = self.last_offset {
            if offset >= last {
                return Err(StoreError::NotReverse(format!("{slot} at offset {offset} after offset {last}")));
            }
        }
        self.last_offset = Some(offset);
        self.read_at(offset, slot)
    }

    /// Iterator over the reverse access pattern: `Final(u^(N_t))`, then one
    /// `Step` per `n = N_t, ..., 1`.
    pub fn read_reverse(&mut self) -> ReverseIter<'_> {
        ReverseIter { reader: self, next: None, done: false }
    }
}

impl ReverseTrajectory for CheckpointReader {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn final_state(&mut self) -> Result<Vector, StoreError> {
        if self.next_step.is_some() {
            return Err(StoreError::NotReverse("final state requested twice".into()));
        }
        let n_t = self.layout.n_steps();
        let u = self.read_reverse_slot(Slot::state(n_t))?;
        self.next_step = Some(n_t);
        Ok(u)
    }

    fn step(&mut self, n: usize) -> Result<StepRecord, StoreError> {
        match self.next_step {
            Some(expected) if expected == n && n >= 1 => {}
            other => {
                return Err(StoreError::NotReverse(format!("step {n} requested, expected {other:?}")));
            }
        }
        let s = self.layout.stages;
        let mut stages = vec![Vector::zeros(0); s];
        for i in (0..s).rev() {
            stages[i] = self.read_reverse_slot(Slot::Stage { step: n, stage: i })?;
        }
        let u_prev = self.read_reverse_slot(Slot::state(n - 1))?;
        self.next_step = Some(n - 1);
        Ok(StepRecord { u_prev, stages })
    }
}

#[derive(Debug, Clone)]
pub enum ReverseItem {
    Final(Vector),
    Step { n: usize, record: StepRecord },
}

pub struct ReverseIter<'a> {
    reader: &'a mut CheckpointReader,
    next: Option<usize>,
    done: bool,
}

impl Iterator for ReverseIter<'_> {
    type Item = Result<ReverseItem, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = match self.next {
            None => {
                let r = self.reader.final_state().map(ReverseItem::Final);
                self.next = Some(self.reader.layout.n_steps());
                r
            }
            Some(0) => {
                self.done = true;
                return None;
            }
            Some(n) => {
                self.next = Some(n - 1);
                self.reader.step(n).map(|record| ReverseItem::Step { n, record })
            }
        };
        if item.is_err() {
            self.done = true;
        }
        Some(item)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(n_u: usize, s: usize, n_t: usize) -> Layout {
        Layout { n_u, stages: s, grid: (0..=n_t).map(|n| n as f64 * 0.1).collect() }
    }

    fn record(n_u: usize, tag: f64) -> Vector {
        Vector::from_fn(n_u, |j, _| tag + j as f64 * 1e-3 + 1.0 / 3.0)
    }

    fn write_all(path: &Path, l: &Layout) {
        let mut w = CheckpointWriter::create(path).unwrap();
        w.begin(l).unwrap();
        w.write(Slot::Initial, &record(l.n_u, 0.0)).unwrap();
        for n in 1..=l.n_steps() {
            for i in 0..l.stages {
                w.write(Slot::Stage { step: n, stage: i }, &record(l.n_u, (n * 10 + i) as f64)).unwrap();
            }
            w.write(Slot::State { step: n }, &record(l.n_u, n as f64 * 100.0)).unwrap();
        }
        w.finish().unwrap();
    }

    #[test]
    fn slot_index_round_trip() {
        for s in 1..4 {
            for idx in 0..40 {
                assert_eq!(Slot::from_index(idx, s).record_index(s), idx);
            }
        }
    }

    #[test]
    fn file_size_matches_formula() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("primal.ckpt");
        let l = layout(60, 3, 10);
        write_all(&path, &l);
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 28 + 8 * 11 + 41 * 60 * 8);
    }

    #[test]
    fn out_of_order_write_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let l = layout(2, 1, 2);
        let mut w = CheckpointWriter::create(dir.path().join("a.ckpt")).unwrap();
        w.begin(&l).unwrap();
        w.write(Slot::Initial, &record(2, 0.0)).unwrap();
        let err = w.write(Slot::Stage { step: 2, stage: 0 }, &record(2, 0.0)).unwrap_err();
        assert!(matches!(err, StoreError::OutOfOrder { .. }));
    }

    #[test]
    fn one_step_reverse_pattern() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let l = layout(3, 2, 1);
        write_all(&path, &l);
        let mut r = CheckpointReader::open_expecting(&path, &l).unwrap();
        let items: Vec<_> = r.read_reverse().collect::<Result<_, _>>().unwrap();
        assert_eq!(items.len(), 2);
        match &items[0] {
            ReverseItem::Final(u) => assert_eq!(u, &record(3, 100.0)),
            _ => panic!("final state first"),
        }
        match &items[1] {
            ReverseItem::Step { n, record: rec } => {
                assert_eq!(*n, 1);
                assert_eq!(rec.u_prev, record(3, 0.0));
                assert_eq!(rec.stages[0], record(3, 10.0));
                assert_eq!(rec.stages[1], record(3, 11.0));
            }
            _ => panic!("step expected"),
        }
    }

    #[test]
    fn header_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        write_all(&path, &layout(3, 2, 4));
        let err = CheckpointReader::open_expecting(&path, &layout(4, 2, 4)).err().unwrap();
        assert!(matches!(err, StoreError::HeaderMismatch { field: "N_u", .. }));
        let mut other = layout(3, 2, 4);
        other.grid[2] += 1e-15;
        let err = CheckpointReader::open_expecting(&path, &other).err().unwrap();
        assert!(matches!(err, StoreError::GridMismatch { index: 2 }));
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        write_all(&path, &layout(3, 2, 4));
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(CheckpointReader::open(&path).err().unwrap(), StoreError::Truncated { .. }));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(CheckpointReader::open(&path).err().unwrap(), StoreError::BadMagic(_)));
    }

    #[test]
    fn forward_access_after_reverse_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let l = layout(2, 2, 3);
        write_all(&path, &l);
        let mut r = CheckpointReader::open(&path).unwrap();
        r.final_state().unwrap();
        assert!(r.step(2).is_err());
        r.step(3).unwrap();
        assert!(r.step(3).is_err());
    }
}
