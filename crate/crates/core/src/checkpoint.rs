//! Versioned binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//! magic `CRANERL\0`, `u32` version, then the config echo as a
//! length-prefixed UTF-8 string, the step counters, three tensor groups
//! (parameters, Adam first and second moments), the normalization
//! statistics, the curriculum tracker, and the RNG states.
//! A tensor is its name, rank, `u64` dimensions and `f64` data.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::curriculum::ProgressTracker;
use crate::env::RunningStats;
use crate::error::{Error, Result};
use crate::nn::{Adam, Dense, PolicyNet};

pub const MAGIC: &[u8; 8] = b"CRANERL\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Exact TOML text of the run configuration.
    pub config_toml: String,
    pub step: u64,
    pub updates: u64,
    pub episodes: u64,
    pub net: PolicyNet,
    pub adam: Adam,
    pub stats: RunningStats,
    pub tracker: ProgressTracker,
    pub rngs: Vec<ChaCha8Rng>,
}

impl Checkpoint {
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml_str(&self.config_toml)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, FORMAT_VERSION);
        put_str(&mut w, &self.config_toml);
        put_u64(&mut w, self.step);
        put_u64(&mut w, self.updates);
        put_u64(&mut w, self.episodes);
        put_net(&mut w, &self.net);
        put_u64(&mut w, self.adam.t);
        put_net(&mut w, &self.adam.m);
        put_net(&mut w, &self.adam.v);
        put_f64(&mut w, self.stats.count);
        put_f64s(&mut w, &self.stats.mean);
        put_f64s(&mut w, &self.stats.m2);
        let t = &self.tracker;
        put_u64(&mut w, t.lesson as u64);
        put_u64(&mut w, t.n_lessons as u64);
        put_u64(&mut w, t.window as u64);
        put_f64(&mut w, t.threshold);
        let outcomes: Vec<u8> = t.outcomes().map(u8::from).collect();
        put_bytes(&mut w, &outcomes);
        put_u32(&mut w, self.rngs.len() as u32);
        for r in &self.rngs {
            w.extend_from_slice(&r.get_seed());
            put_u64(&mut w, r.get_stream());
            w.extend_from_slice(&r.get_word_pos().to_le_bytes());
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let config_toml = r.string()?;
        let step = r.u64()?;
        let updates = r.u64()?;
        let episodes = r.u64()?;
        let net = r.net()?;
        let t = r.u64()?;
        let m = r.net()?;
        let v = r.net()?;
        let adam = Adam {
            m,
            v,
            t,
            ..Adam::new(&net)
        };
        let count = r.f64()?;
        let mean = r.f64s()?;
        let m2 = r.f64s()?;
        let stats = RunningStats { count, mean, m2 };
        let lesson = r.u64()? as usize;
        let n_lessons = r.u64()? as usize;
        let window = r.u64()? as usize;
        let threshold = r.f64()?;
        let outcomes = r.bytes()?.iter().map(|b| *b != 0).collect();
        let tracker = ProgressTracker::from_parts(lesson, n_lessons, window, threshold, outcomes);
        let n_rng = r.u32()? as usize;
        let mut rngs = Vec::with_capacity(n_rng);
        for _ in 0..n_rng {
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(word_pos);
            rngs.push(rng);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config_toml,
            step,
            updates,
            episodes,
            net,
            adam,
            stats,
            tracker,
            rngs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Writes `data` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(data)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    put_u64(w, b.len() as u64);
    w.extend_from_slice(b);
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_bytes(w, s.as_bytes());
}

fn put_f64s(w: &mut Vec<u8>, v: &[f64]) {
    put_u64(w, v.len() as u64);
    for x in v {
        put_f64(w, *x);
    }
}

fn put_net(w: &mut Vec<u8>, net: &PolicyNet) {
    let tensors = net.tensors();
    put_u32(w, tensors.len() as u32);
    for (name, shape, data) in tensors {
        put_str(w, &name);
        put_u32(w, shape.len() as u32);
        for d in shape {
            put_u64(w, d as u64);
        }
        for x in data {
            put_f64(w, *x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(Error::Checkpoint("length prefix past end of file".into()));
        }
        Ok(n as usize)
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn tensor(&mut self, expect: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let name = self.string()?;
        if name != expect {
            return Err(Error::Checkpoint(format!("expected tensor {expect}, found {name}")));
        }
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::Checkpoint(format!("tensor {name} runs past end of file")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok((shape, data))
    }

    fn dense(&mut self, prefix: &str) -> Result<Dense> {
        let (ws, w) = self.tensor(&format!("{prefix}.w"))?;
        let (bs, b) = self.tensor(&format!("{prefix}.b"))?;
        if ws.len() != 2 || bs.len() != 1 || bs[0] != ws[0] {
            return Err(Error::Checkpoint(format!("bad shapes for layer {prefix}")));
        }
        Ok(Dense {
            w: Array2::from_shape_vec((ws[0], ws[1]), w).expect("shape checked"),
            b: Array1::from(b),
        })
    }

    fn net(&mut self) -> Result<PolicyNet> {
        let count = self.u32()? as usize;
        if count < 5 || count % 2 == 0 {
            return Err(Error::Checkpoint(format!("bad tensor count {count}")));
        }
        let n_hidden = (count - 5) / 2;
        let trunk = (0..n_hidden)
            .map(|i| self.dense(&format!("trunk{i}")))
            .collect::<Result<Vec<_>>>()?;
        let mean_head = self.dense("mean")?;
        let value_head = self.dense("value")?;
        let (_, log_std) = self.tensor("log_std")?;
        Ok(PolicyNet {
            trunk,
            mean_head,
            value_head,
            log_std: Array1::from(log_std),
        })
    }
}
