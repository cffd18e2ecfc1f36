//! Self-describing binary checkpoints and checkpoint averaging.
//!
//! Layout: the magic `PNMT`, a format version, the configuration as
//! length-prefixed `key = value` text, the step counter, the training RNG
//! state, the parameter records (name, shape, raw little-endian f32), and
//! the optimizer state. Saves are write-temp-then-rename, so a crash never
//! leaves a torn file; save → load → save is byte-identical.

use super::optim::{OptimizerKind, OptimizerState, Schedule};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"PNMT";
const VERSION: u32 = 1;

/// Everything needed to resume a training run exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<f32>>,
    pub step: u64,
    pub rng_state: Option<[u64; 4]>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model<f32>,
        rng_state: Option<[u64; 4]>,
        optimizer: Option<&OptimizerState>,
    ) -> Checkpoint {
        Checkpoint {
            config: model.config.clone(),
            params: model.params.clone(),
            step: model.step,
            rng_state,
            optimizer: optimizer.cloned(),
        }
    }

    pub fn into_model(self) -> Result<Model<f32>> {
        Model::from_parts(self.config, self.params, self.step)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        match self.rng_state {
            Some(s) => {
                out.push(1);
                for w in s {
                    out.extend_from_slice(&w.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        write_records(&mut out, &self.params);
        match &self.optimizer {
            None => out.push(0),
            Some(state) => match state.kind {
                OptimizerKind::Adagrad { lr } => {
                    out.push(1);
                    out.extend_from_slice(&lr.to_le_bytes());
                    out.extend_from_slice(&state.step.to_le_bytes());
                    write_records(&mut out, &state.accum_m);
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps, schedule } => {
                    out.push(2);
                    for v in [lr, beta1, beta2, eps] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                    match schedule {
                        Some(s) => {
                            out.push(1);
                            out.extend_from_slice(&s.warmup.to_le_bytes());
                            out.extend_from_slice(&(s.model_dim as u64).to_le_bytes());
                            out.extend_from_slice(&s.scale.to_le_bytes());
                        }
                        None => out.push(0),
                    }
                    out.extend_from_slice(&state.step.to_le_bytes());
                    write_records(&mut out, &state.accum_m);
                    write_records(&mut out, &state.accum_v);
                }
            },
        }
        out
    }

    fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Input("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Input(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Input("config text is not UTF-8".into()))?;
        let config = ModelConfig::from_text(cfg_text)?;
        let step = r.u64()?;
        let rng_state = match r.u8()? {
            0 => None,
            1 => Some([r.u64()?, r.u64()?, r.u64()?, r.u64()?]),
            other => return Err(Error::Input(format!("bad rng flag {other}"))),
        };
        let params = read_records(&mut r)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let lr = r.f64()?;
                let opt_step = r.u64()?;
                let accum_m = read_records(&mut r)?;
                Some(OptimizerState {
                    kind: OptimizerKind::Adagrad { lr },
                    accum_m,
                    accum_v: BTreeMap::new(),
                    step: opt_step,
                })
            }
            2 => {
                let lr = r.f64()?;
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let eps = r.f64()?;
                let schedule = match r.u8()? {
                    0 => None,
                    1 => Some(Schedule {
                        warmup: r.u64()?,
                        model_dim: r.u64()? as usize,
                        scale: r.f64()?,
                    }),
                    other => return Err(Error::Input(format!("bad schedule flag {other}"))),
                };
                let opt_step = r.u64()?;
                let accum_m = read_records(&mut r)?;
                let accum_v = read_records(&mut r)?;
                Some(OptimizerState {
                    kind: OptimizerKind::Adam { lr, beta1, beta2, eps, schedule },
                    accum_m,
                    accum_v,
                    step: opt_step,
                })
            }
            other => return Err(Error::Input(format!("bad optimizer kind {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Input(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { config, params, step, rng_state, optimizer })
    }
}

fn write_records(out: &mut Vec<u8>, tensors: &BTreeMap<String, Tensor<f32>>) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_records(r: &mut Reader<'_>) -> Result<BTreeMap<String, Tensor<f32>>> {
    let count = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Input("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f32()?);
        }
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Input("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Arithmetic mean of the parameters of several checkpoints; optimizer
/// state is discarded and the step counter of the newest survives.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<Model<f32>> {
    if paths.is_empty() {
        return Err(Error::Input("need at least one checkpoint to average".into()));
    }
    let first = Checkpoint::load(&paths[0])?;
    let mut sums: BTreeMap<String, Vec<f64>> = first
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.data().iter().map(|&x| x as f64).collect()))
        .collect();
    let mut step = first.step;
    for path in &paths[1..] {
        let ck = Checkpoint::load(path)?;
        if ck.config != first.config {
            let diffs = config_diff(&first.config, &ck.config);
            return Err(Error::Input(format!(
                "checkpoint {} differs in config fields: {}",
                path.display(),
                diffs.join(", ")
            )));
        }
        let names_a: Vec<&String> = first.params.keys().collect();
        let names_b: Vec<&String> = ck.params.keys().collect();
        if names_a != names_b {
            return Err(Error::Input(format!(
                "checkpoint {} has different parameter names",
                path.display()
            )));
        }
        for (name, t) in &ck.params {
            for (s, &v) in sums.get_mut(name).unwrap().iter_mut().zip(t.data()) {
                *s += v as f64;
            }
        }
        step = step.max(ck.step);
    }
    let n = paths.len() as f64;
    let params: BTreeMap<String, Tensor<f32>> = sums
        .into_iter()
        .map(|(name, sum)| {
            let shape = first.params[&name].shape().to_vec();
            let data: Vec<f32> = sum.into_iter().map(|s| (s / n) as f32).collect();
            (name, Tensor::new(shape, data).expect("averaged shape"))
        })
        .collect();
    Model::from_parts(first.config, params, step)
}

fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let parse = |cfg: &ModelConfig| -> BTreeMap<String, String> {
        cfg.to_text()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect()
    };
    let (ma, mb) = (parse(a), parse(b));
    ma.iter()
        .filter(|(k, v)| mb.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect()
}

/// Checkpoints in a run directory, oldest first, by step number parsed
/// from the `ckpt-<step>` name.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(step) = name.strip_prefix("ckpt-").and_then(|s| s.parse::<u64>().ok()) {
            found.push((step, entry.path()));
        }
    }
    found.sort_by_key(|(s, _)| *s);
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Drop the oldest checkpoints beyond `keep` and point `latest` at the
/// newest one.
pub fn prune_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let all = list_checkpoints(dir)?;
    if all.len() > keep {
        for old in &all[..all.len() - keep] {
            std::fs::remove_file(old).map_err(|e| Error::io(old, e))?;
        }
    }
    if let Some(newest) = all.last() {
        let name = newest.file_name().unwrap().to_string_lossy().into_owned();
        let latest = dir.join("latest");
        std::fs::write(&latest, format!("{name}\n")).map_err(|e| Error::io(&latest, e))?;
    }
    Ok(())
}

/// Resolve the `latest` pointer file of a run directory.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let pointer = dir.join("latest");
    if !pointer.exists() {
        return Ok(None);
    }
    let name = std::fs::read_to_string(&pointer).map_err(|e| Error::io(&pointer, e))?;
    let path = dir.join(name.trim());
    if !path.exists() {
        return Err(Error::Input(format!(
            "latest pointer names a missing checkpoint: {}",
            path.display()
        )));
    }
    Ok(Some(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::Rng;

    fn small_model(seed: u64) -> Model<f32> {
        Model::build(ModelConfig::desk_transformer(20), seed).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(1);
        let mut opt = OptimizerState::new(OptimizerKind::scheduled_adam(100, 64, 2.0));
        opt.step = 17;
        let rng = Rng::seed_from(5);
        let ck = Checkpoint::from_model(&model, Some(rng.state()), Some(&opt));
        let p1 = dir.path().join("ckpt-1");
        let p2 = dir.path().join("ckpt-2");
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.step, model.step);
        assert_eq!(loaded.rng_state, Some(rng.state()));
        assert_eq!(loaded.optimizer.as_ref().unwrap().step, 17);
    }

    #[test]
    fn averaging_identical_checkpoints_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(2);
        let ck = Checkpoint::from_model(&model, None, None);
        let paths: Vec<PathBuf> = (0..3)
            .map(|i| {
                let p = dir.path().join(format!("ckpt-{i}"));
                ck.save(&p).unwrap();
                p
            })
            .collect();
        let avg = average_checkpoints(&paths).unwrap();
        for (name, t) in &model.params {
            let diff = t.max_abs_diff(&avg.params[name]);
            assert!(diff <= 1e-7, "{name} diff {diff}");
        }
    }

    #[test]
    fn averaging_two_values_gives_their_mean() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = small_model(3);
        let mut b = a.clone();
        let name = "embed".to_string();
        a.params.insert(name.clone(), Tensor::full(a.params[&name].shape(), 0.0));
        b.params.insert(name.clone(), Tensor::full(b.params[&name].shape(), 2.0));
        let pa = dir.path().join("ckpt-0");
        let pb = dir.path().join("ckpt-1");
        Checkpoint::from_model(&a, None, None).save(&pa).unwrap();
        Checkpoint::from_model(&b, None, None).save(&pb).unwrap();
        let avg = average_checkpoints(&[pa, pb]).unwrap();
        for &v in avg.params[&name].data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn averaging_matches_elementwise_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let models: Vec<Model<f32>> = (0..7).map(|i| small_model(100 + i)).collect();
        let paths: Vec<PathBuf> = models
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let p = dir.path().join(format!("ckpt-{i}"));
                Checkpoint::from_model(m, None, None).save(&p).unwrap();
                p
            })
            .collect();
        let avg = average_checkpoints(&paths).unwrap();
        for name in models[0].params.keys() {
            let t = &avg.params[name];
            for (j, &got) in t.data().iter().enumerate() {
                let want: f64 =
                    models.iter().map(|m| m.params[name].data()[j] as f64).sum::<f64>() / 7.0;
                assert!(
                    (got as f64 - want).abs() <= 1e-7,
                    "{name}[{j}]: {got} vs oracle {want}"
                );
            }
        }
    }

    #[test]
    fn averaging_rejects_config_mismatch_naming_fields() {
        let dir = tempfile::tempdir().unwrap();
        let a = small_model(4);
        let b = Model::<f32>::build(ModelConfig::desk_transformer(21), 4).unwrap();
        let pa = dir.path().join("ckpt-0");
        let pb = dir.path().join("ckpt-1");
        Checkpoint::from_model(&a, None, None).save(&pa).unwrap();
        Checkpoint::from_model(&b, None, None).save(&pb).unwrap();
        match average_checkpoints(&[pa, pb]) {
            Err(Error::Input(msg)) => assert!(msg.contains("vocab_size"), "got: {msg}"),
            other => panic!("expected input error, got {other:?}"),
        }
    }

    #[test]
    fn ring_buffer_keeps_the_newest() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(5);
        for step in [10u64, 20, 30, 40] {
            let mut m = model.clone();
            m.step = step;
            Checkpoint::from_model(&m, None, None)
                .save(&dir.path().join(format!("ckpt-{step}")))
                .unwrap();
            prune_checkpoints(dir.path(), 2).unwrap();
        }
        let left = list_checkpoints(dir.path()).unwrap();
        let names: Vec<String> =
            left.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, vec!["ckpt-30", "ckpt-40"]);
        let latest = latest_checkpoint(dir.path()).unwrap().unwrap();
        assert!(latest.ends_with("ckpt-40"));
    }
}
