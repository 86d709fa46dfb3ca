use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::config_digest;
use crate::error::{Error, Result};
use crate::model::{allowed_from_bias, apply_bias_mask, Model, ModelConfig, Params};
use crate::numerics::Tensor;

const MAGIC: &str = "#ckpt-v1";
const BEST: &str = "best.ckpt";

/// Parameters plus the training position they were saved at.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub epoch: u64,
    pub config: ModelConfig,
    pub params: Params,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, epoch: u64) -> Self {
        Self {
            step,
            epoch,
            config: model.config.clone(),
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Model {
        Model {
            config: self.config,
            params: self.params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = self.config.to_kv();
        let mut out = format!(
            "{MAGIC}\nstep={}\nepoch={}\ndigest={}\nconfig_lines={}\n{config}tensors={}\n",
            self.step,
            self.epoch,
            config_digest(&config),
            config.lines().count(),
            self.params.len()
        )
        .into_bytes();
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            out.extend(format!("tensor {name} f64 {} {}\n", t.rank(), dims.join(" ")).as_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::format(path, detail);
        let mut r = Reader { bytes, pos: 0 };
        if r.line().map_err(&bad)? != MAGIC {
            return Err(bad(format!("missing '{MAGIC}' header")));
        }
        let step = r.field("step").map_err(&bad)?;
        let epoch = r.field("epoch").map_err(&bad)?;
        let digest = r.value("digest").map_err(&bad)?.to_string();
        let n_lines: usize = r.field("config_lines").map_err(&bad)?;
        let mut config = String::new();
        for _ in 0..n_lines {
            config.push_str(r.line().map_err(&bad)?);
            config.push('\n');
        }
        if config_digest(&config) != digest {
            return Err(bad("config digest mismatch".into()));
        }
        let config = ModelConfig::from_kv(&config)?;
        let n: usize = r.field("tensors").map_err(&bad)?;
        let mut params = Params::new();
        for _ in 0..n {
            let head = r.line().map_err(&bad)?;
            let parts: Vec<&str> = head.split(' ').collect();
            if parts.len() < 4 || parts[0] != "tensor" || parts[2] != "f64" {
                return Err(bad(format!("bad tensor header '{head}'")));
            }
            let rank: usize = parts[3].parse().map_err(|_| bad(format!("bad rank in '{head}'")))?;
            let dims: Vec<usize> = parts[4..]
                .iter()
                .map(|d| d.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(format!("bad dims in '{head}'")))?;
            if dims.len() != rank {
                return Err(bad(format!("rank {rank} does not match dims in '{head}'")));
            }
            let count: usize = dims.iter().product();
            let raw = r.take(count * 8).map_err(&bad)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(parts[1], Tensor::new(dims, data)?);
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after last tensor".into()));
        }
        Ok(Self {
            step,
            epoch,
            config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::storage(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> std::result::Result<&'a str, String> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| "unexpected end of file".to_string())?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| "header is not UTF-8".to_string())
    }

    fn value(&mut self, key: &str) -> std::result::Result<&'a str, String> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|s| s.strip_prefix('='))
            .ok_or_else(|| format!("expected '{key}=', got '{line}'"))
    }

    fn field<T: std::str::FromStr>(&mut self, key: &str) -> std::result::Result<T, String> {
        let v = self.value(key)?;
        v.parse().map_err(|_| format!("bad value '{v}' for {key}"))
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err("truncated tensor data".into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// The newest `keep_last` step checkpoints in one directory, plus the
/// checkpoint with the lowest validation perplexity so far.
#[derive(Debug)]
pub struct CheckpointStore {
    dir: PathBuf,
    keep_last: usize,
    entries: VecDeque<(u64, PathBuf)>,
    best: Option<f64>,
}

impl CheckpointStore {
    pub fn new(dir: &Path, keep_last: usize) -> Result<Self> {
        if keep_last == 0 {
            return Err(Error::Config("keep_last must be positive".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            keep_last,
            entries: VecDeque::new(),
            best: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn step_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step-{step:010}.ckpt"))
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join(BEST)
    }

    /// Writes the checkpoint and deletes the oldest ones beyond `keep_last`.
    pub fn save_and_prune(&mut self, ckpt: &Checkpoint) -> Result<PathBuf> {
        if let Some(&(last, _)) = self.entries.back() {
            if ckpt.step <= last {
                return Err(Error::Precondition(format!(
                    "checkpoint step {} is not after the newest stored step {last}",
                    ckpt.step
                )));
            }
        }
        let path = self.step_path(ckpt.step);
        ckpt.save(&path)?;
        self.entries.push_back((ckpt.step, path.clone()));
        while self.entries.len() > self.keep_last {
            let (_, old) = self.entries.pop_front().expect("non-empty");
            fs::remove_file(&old).map_err(|e| Error::storage(&old, e))?;
        }
        Ok(path)
    }

    /// Keeps `ckpt` as the best one if `perplexity` beats every earlier value.
    pub fn offer_best(&mut self, ckpt: &Checkpoint, perplexity: f64) -> Result<bool> {
        if self.best.is_some_and(|b| b <= perplexity) {
            return Ok(false);
        }
        ckpt.save(&self.best_path())?;
        self.best = Some(perplexity);
        Ok(true)
    }

    pub fn best_perplexity(&self) -> Option<f64> {
        self.best
    }

    pub fn steps(&self) -> Vec<u64> {
        self.entries.iter().map(|(s, _)| *s).collect()
    }

    pub fn load_all(&self) -> Result<Vec<Checkpoint>> {
        self.entries.iter().map(|(_, p)| Checkpoint::load(p)).collect()
    }
}

/// Step checkpoints found in `dir`, ordered by step. `best.ckpt` is skipped.
pub fn load_checkpoint_dir(dir: &Path) -> Result<Vec<Checkpoint>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::storage(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("step-") && n.ends_with(".ckpt"))
        })
        .collect();
    paths.sort();
    let mut ckpts = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    ckpts.sort_by_key(|c| c.step);
    Ok(ckpts)
}

/// Element-wise mean via a running average, so identical inputs come back
/// bit-for-bit.
pub fn mean_params(sets: &[&Params]) -> Result<Params> {
    let first = *sets
        .first()
        .ok_or_else(|| Error::Precondition("nothing to average".into()))?;
    if let Some(bad) = sets.iter().find(|p| !p.same_layout(first)) {
        return Err(Error::Ensemble(format!(
            "checkpoint with {} tensors does not match the layout of the first",
            bad.len()
        )));
    }
    let mut mean = first.clone();
    for (k, p) in sets.iter().enumerate().skip(1) {
        let w = 1.0 / (k + 1) as f64;
        for ((_, m), (_, x)) in mean.iter_mut().zip(p.iter()) {
            for (a, b) in m.data_mut().iter_mut().zip(x.data()) {
                *a += (b - *a) * w;
            }
        }
    }
    Ok(mean)
}

/// Splits the checkpoints (in step order) into adjacent windows of
/// `window` and averages each. With fewer than a full multiple the oldest
/// leftovers are dropped so every window ends at the newest checkpoints.
/// The classifier mask is re-applied to each average.
pub fn average_checkpoints(ckpts: &[Checkpoint], window: usize) -> Result<Vec<Checkpoint>> {
    if window == 0 {
        return Err(Error::Config("average window must be positive".into()));
    }
    let mut sorted: Vec<&Checkpoint> = ckpts.iter().collect();
    sorted.sort_by_key(|c| c.step);
    let n = sorted.len() / window;
    if n == 0 {
        return Err(Error::Precondition(format!(
            "{} checkpoints cannot fill one window of {window}",
            sorted.len()
        )));
    }
    if !sorted.len().is_multiple_of(window) || n < 4 {
        log::warn!(
            "averaging {n} full window(s) of {window} from {} checkpoints",
            sorted.len()
        );
    }
    let config = &sorted[0].config;
    if sorted.iter().any(|c| &c.config != config) {
        return Err(Error::Ensemble("checkpoints disagree on model configuration".into()));
    }
    let allowed = allowed_from_bias(&sorted[0].params)?;
    let skip = sorted.len() % window;
    sorted[skip..]
        .chunks(window)
        .map(|w| {
            let sets: Vec<&Params> = w.iter().map(|c| &c.params).collect();
            let mut params = mean_params(&sets)?;
            apply_bias_mask(&mut params, &allowed)?;
            let last = w.last().expect("window is non-empty");
            Ok(Checkpoint {
                step: last.step,
                epoch: last.epoch,
                config: config.clone(),
                params,
            })
        })
        .collect()
}
