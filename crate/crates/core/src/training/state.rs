//! On-disk pretraining state at an epoch boundary: the checkpoint, Adam
//! moments, step counters and the curves logged so far.

use std::path::Path;

use super::{EpochRecord, LossCurve, MlmRun, PretrainConfig, TrainError};
use crate::model::{checkpoint_bytes, parse_checkpoint};
use crate::numcore::AdamState;

const MAGIC: &[u8; 8] = b"BLKLMST1";

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, msg: &str) -> TrainError {
    io_err(path, std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string()))
}

fn put_section(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn save_train_state(run: &MlmRun, path: &Path) -> Result<(), TrainError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_section(&mut out, &checkpoint_bytes(&run.model, None));
    for v in [run.epochs_done as u64, run.steps_done as u64, run.adam.step] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_section(&mut out, run.curve.to_csv().as_bytes());
    put_section(&mut out, super::lr_csv(&run.lr_log).as_bytes());
    for buf in run.adam.m.iter().chain(&run.adam.v) {
        for x in buf {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

struct Cursor<'b>(&'b [u8]);

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Option<&'b [u8]> {
        (self.0.len() >= n).then(|| {
            let (a, b) = self.0.split_at(n);
            self.0 = b;
            a
        })
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn section(&mut self) -> Option<&'b [u8]> {
        let n = self.u64()?;
        self.take(usize::try_from(n).ok()?)
    }
}

fn parse_curve(text: &str) -> Option<LossCurve> {
    let mut records = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return None;
        }
        records.push(EpochRecord {
            epoch: f[0].parse().ok()?,
            train_loss: f[1].parse().ok()?,
            valid_loss: if f[2].is_empty() { None } else { Some(f[2].parse().ok()?) },
            seconds: f[3].parse().ok()?,
        });
    }
    Some(LossCurve { records })
}

fn parse_lr(text: &str) -> Option<Vec<(usize, f64)>> {
    text.lines()
        .skip(1)
        .map(|l| {
            let (s, v) = l.split_once(',')?;
            Some((s.parse().ok()?, v.parse().ok()?))
        })
        .collect()
}

/// Restores a run saved by [`save_train_state`]; the optimizer
/// hyperparameters come from `cfg`.
pub fn load_train_state(path: &Path, cfg: &PretrainConfig) -> Result<MlmRun, TrainError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut c = Cursor(&bytes);
    if c.take(MAGIC.len()) != Some(MAGIC.as_slice()) {
        return Err(corrupt(path, "not a training-state file"));
    }
    let truncated = || corrupt(path, "training state is truncated");
    let ckpt = parse_checkpoint(c.section().ok_or_else(truncated)?)?;
    let mut counters = [0u64; 3];
    for v in &mut counters {
        *v = c.u64().ok_or_else(truncated)?;
    }
    let text = |s: &[u8]| String::from_utf8(s.to_vec()).map_err(|_| corrupt(path, "bad text section"));
    let curve = parse_curve(&text(c.section().ok_or_else(truncated)?)?).ok_or_else(|| corrupt(path, "bad loss curve"))?;
    let lr_log = parse_lr(&text(c.section().ok_or_else(truncated)?)?).ok_or_else(|| corrupt(path, "bad lr log"))?;

    let model = ckpt.model;
    let mut adam = AdamState::new(model.params(), cfg.optim.adam);
    adam.step = counters[2];
    for buf in adam.m.iter_mut().chain(adam.v.iter_mut()) {
        let raw = c.take(buf.len() * 4).ok_or_else(truncated)?;
        for (x, b) in buf.iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
    }
    if !c.0.is_empty() {
        return Err(corrupt(path, "trailing bytes"));
    }
    Ok(MlmRun {
        model,
        adam,
        epochs_done: counters[0] as usize,
        steps_done: counters[1] as usize,
        curve,
        lr_log,
    })
}
