//! Bias-corrected Adam over a fixed list of parameter tensors.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, BinReader, BinWriter};
use crate::error::{Error, Result};

const STATE_MAGIC: &[u8; 4] = b"PQAD";
const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Gradient of one tensor: dense, or row-sparse for embedding tables.
#[derive(Debug, Clone, Copy)]
pub enum GradView<'a> {
    Dense(&'a [f64]),
    Rows {
        rows: &'a BTreeMap<u32, Vec<f64>>,
        width: usize,
    },
}

impl GradView<'_> {
    fn is_finite(&self) -> bool {
        match self {
            GradView::Dense(g) => g.iter().all(|v| v.is_finite()),
            GradView::Rows { rows, .. } => rows.values().all(|r| r.iter().all(|v| v.is_finite())),
        }
    }
}

/// First and second moments per tensor plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[inline]
fn adam_elem(p: &mut f64, m: &mut f64, v: &mut f64, g: f64, cfg: &AdamConfig, bc1: f64, bc2: f64) {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. Fails without touching anything if a gradient is not finite.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut [&mut [f64]], grads: &[GradView<'_>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid("parameter/gradient/moment tensor count mismatch"));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.len() != m.len() {
                return Err(Error::DimensionMismatch {
                    expected: m.len(),
                    actual: p.len(),
                });
            }
        }
        if !grads.iter().all(GradView::is_finite) {
            return Err(Error::NonFinite("gradient"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for ((p, (m, v)), g) in params
            .iter_mut()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .zip(grads)
        {
            match *g {
                GradView::Dense(g) => {
                    if g.len() != p.len() {
                        return Err(Error::DimensionMismatch {
                            expected: p.len(),
                            actual: g.len(),
                        });
                    }
                    p.par_chunks_mut(4096)
                        .zip(m.par_chunks_mut(4096))
                        .zip(v.par_chunks_mut(4096))
                        .zip(g.par_chunks(4096))
                        .for_each(|(((p, m), v), g)| {
                            for i in 0..p.len() {
                                adam_elem(&mut p[i], &mut m[i], &mut v[i], g[i], cfg, bc1, bc2);
                            }
                        });
                }
                GradView::Rows { rows, width } => {
                    p.par_chunks_mut(width)
                        .zip(m.par_chunks_mut(width))
                        .zip(v.par_chunks_mut(width))
                        .enumerate()
                        .for_each(|(r, ((p, m), v))| {
                            let g = rows.get(&(r as u32));
                            for i in 0..p.len() {
                                let gi = g.map_or(0.0, |g| g[i]);
                                adam_elem(&mut p[i], &mut m[i], &mut v[i], gi, cfg, bc1, bc2);
                            }
                        });
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(STATE_MAGIC);
        w.u32(STATE_VERSION);
        w.u64(self.step);
        w.u32(self.m.len() as u32);
        for (m, v) in self.m.iter().zip(&self.v) {
            w.u64(m.len() as u64);
            m.iter().for_each(|&x| w.f64(x));
            v.iter().for_each(|&x| w.f64(x));
        }
        w.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::open(path, &bytes, STATE_MAGIC)?;
        let version = r.u32()?;
        if version != STATE_VERSION {
            return Err(r.format_err(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u64()? as usize;
            m.push((0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
            v.push((0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        }
        r.expect_end()?;
        Ok(Self { step, m, v })
    }
}
