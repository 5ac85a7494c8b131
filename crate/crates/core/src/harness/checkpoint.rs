//! LKCK checkpoints.
//!
//! Layout (little-endian): magic `LKCK`, version `u32 = 1`, step `u64`, then
//! two tables (parameters, optimizer state), each an entry count `u32`
//! followed by `[name-len u16, name, rank u8, extents u32×rank, f32×prod]`.
//! A trailer `[len u32, UTF-8 text]` carries the run configuration echo.
//! Optimizer entries are named `adam.m.<param>` and `adam.v.<param>`.

use std::fs;
use std::path::Path;

use super::optim::{Moments, OptimizerState};
use crate::backbone::Model;
use crate::error::{Error, Result};

pub const LKCK_MAGIC: &[u8; 4] = b"LKCK";
pub const LKCK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Entry {
    fn from_f64(name: String, shape: &[usize], values: &[f64]) -> Self {
        Entry {
            name,
            shape: shape.to_vec(),
            values: values.iter().map(|&v| v as f32).collect(),
        }
    }

    fn widened(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: Vec<Entry>,
    pub optimizer: Vec<Entry>,
    pub config: String,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Length {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }

    fn table(&mut self) -> Result<Vec<Entry>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = self.u16()? as usize;
            let name = self.utf8(len)?;
            let rank = self.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = self.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Format(format!("entry {name} has an absurd size")))?,
            )?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push(Entry {
                name,
                shape,
                values,
            });
        }
        Ok(out)
    }
}

fn write_table(out: &mut Vec<u8>, entries: &[Entry]) -> Result<()> {
    out.extend_from_slice(
        &u32::try_from(entries.len())
            .unwrap_or(u32::MAX)
            .to_le_bytes(),
    );
    for e in entries {
        let name_len = u16::try_from(e.name.len())
            .map_err(|_| Error::Validation(format!("name {} too long", e.name)))?;
        let rank = u8::try_from(e.shape.len())
            .map_err(|_| Error::Validation(format!("rank of {} too large", e.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(rank);
        for &d in &e.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::Validation(format!("extent {d} of {} too large", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

impl Checkpoint {
    /// Snapshot of every registry parameter and all optimizer moments.
    pub fn capture(model: &Model, state: &OptimizerState, config: &str) -> Self {
        let params = model
            .named_params()
            .into_iter()
            .map(|(n, t)| Entry::from_f64(n, t.shape(), t.data()))
            .collect();
        let mut optimizer = Vec::with_capacity(2 * state.moments.len());
        for mo in &state.moments {
            optimizer.push(Entry::from_f64(
                format!("adam.m.{}", mo.name),
                &mo.shape,
                &mo.m,
            ));
            optimizer.push(Entry::from_f64(
                format!("adam.v.{}", mo.name),
                &mo.shape,
                &mo.v,
            ));
        }
        Checkpoint {
            step: state.step,
            params,
            optimizer,
            config: config.to_string(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(LKCK_MAGIC);
        out.extend_from_slice(&LKCK_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        write_table(&mut out, &self.params)?;
        write_table(&mut out, &self.optimizer)?;
        let text = u32::try_from(self.config.len())
            .map_err(|_| Error::Validation("config echo too long".into()))?;
        out.extend_from_slice(&text.to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != LKCK_MAGIC {
            return Err(Error::Format("bad magic, expected \"LKCK\"".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != LKCK_VERSION {
            return Err(Error::Format(format!("unsupported LKCK version {version}")));
        }
        let step = r.u64()?;
        let params = r.table()?;
        let optimizer = r.table()?;
        let len = r.u32()? as usize;
        let config = r.utf8(len)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes in checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            step,
            params,
            optimizer,
            config,
        })
    }

    /// Loads parameters into `model` and rebuilds the optimizer state.
    ///
    /// Every name or shape disagreement is collected; the first offender in
    /// registry order heads the list.
    pub fn restore(&self, model: &mut Model) -> Result<OptimizerState> {
        let mut offenders = Vec::new();
        {
            let named = model.named_params();
            for i in 0..named.len().max(self.params.len()) {
                match (named.get(i), self.params.get(i)) {
                    (Some((n, t)), Some(e)) if *n != e.name || t.shape() != e.shape => offenders
                        .push(format!(
                            "{n} {:?} vs stored {} {:?}",
                            t.shape(),
                            e.name,
                            e.shape
                        )),
                    (Some((n, _)), None) => offenders.push(format!("{n} missing from checkpoint")),
                    (None, Some(e)) => offenders.push(format!("{} unknown to model", e.name)),
                    _ => {}
                }
            }
        }
        if !offenders.is_empty() {
            return Err(Error::Compatibility(offenders));
        }
        let state = self.optimizer_state()?;
        for ((_, t), e) in model.named_params_mut().into_iter().zip(&self.params) {
            t.data_mut().copy_from_slice(&e.widened());
        }
        for mo in &state.moments {
            let known = model
                .named_params()
                .into_iter()
                .any(|(n, t)| n == mo.name && t.shape() == mo.shape.as_slice());
            if !known {
                return Err(Error::Compatibility(vec![format!(
                    "optimizer state for unknown parameter {}",
                    mo.name
                )]));
            }
        }
        Ok(state)
    }

    pub fn optimizer_state(&self) -> Result<OptimizerState> {
        if !self.optimizer.len().is_multiple_of(2) {
            return Err(Error::Format(
                "optimizer table holds an odd number of entries".into(),
            ));
        }
        let mut moments = Vec::new();
        for pair in self.optimizer.chunks(2) {
            let (m, v) = (&pair[0], &pair[1]);
            let name = m.name.strip_prefix("adam.m.");
            if name.is_none() || v.name.strip_prefix("adam.v.") != name || m.shape != v.shape {
                return Err(Error::Format(format!(
                    "optimizer entries {} / {} do not pair up",
                    m.name, v.name
                )));
            }
            moments.push(Moments {
                name: name.unwrap().to_string(),
                shape: m.shape.clone(),
                m: m.widened(),
                v: v.widened(),
            });
        }
        Ok(OptimizerState {
            step: self.step,
            moments,
        })
    }
}

pub fn save_checkpoint(
    model: &Model,
    state: &OptimizerState,
    config: &str,
    path: &Path,
) -> Result<()> {
    let bytes = Checkpoint::capture(model, state, config).to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_model, ModelConfig};

    fn small(d: usize) -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: d,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            bottleneck: 2,
            kernel: Some(1),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_identical() {
        let model = build_model(&small(8), 1).unwrap();
        let ck = Checkpoint::capture(&model, &OptimizerState::new(), "seed = 1\n");
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut fresh = build_model(&small(8), 2).unwrap();
        back.restore(&mut fresh).unwrap();
        for ((_, a), (_, b)) in fresh.named_params().into_iter().zip(model.named_params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn mismatched_width_names_first_offender() {
        let model = build_model(&small(8), 1).unwrap();
        let ck = Checkpoint::capture(&model, &OptimizerState::new(), "");
        let mut other = build_model(&small(12), 1).unwrap();
        match ck.restore(&mut other) {
            Err(Error::Compatibility(list)) => assert!(list[0].starts_with("patch_embed.weight")),
            other => panic!("expected compatibility error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let model = build_model(&small(8), 1).unwrap();
        let mut bytes = Checkpoint::capture(&model, &OptimizerState::new(), "")
            .to_bytes()
            .unwrap();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }
}
