//! AdamW with decoupled weight decay, plus optimizer-state checkpointing.

use std::io::{self, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;

use crate::params::{bad_data, read_named_tensor, write_named_tensor, ParamStore};
use crate::tape::Gradients;

const OPT_MAGIC: &[u8; 8] = b"S2ROPT01";

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let m = store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        let v = store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let p = store.value_mut(id);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *pv -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pv);
                });
        }
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        io::Write::write_all(&mut buf, OPT_MAGIC)?;
        buf.write_u64::<LittleEndian>(self.step)?;
        buf.write_u32::<LittleEndian>(self.m.len() as u32)?;
        for (i, t) in self.m.iter().enumerate() {
            write_named_tensor(&mut buf, &format!("m{i}"), t)?;
        }
        for (i, t) in self.v.iter().enumerate() {
            write_named_tensor(&mut buf, &format!("v{i}"), t)?;
        }
        std::fs::write(path, buf)
    }

    /// Restore moments and step count saved by [`AdamW::save`].
    pub fn load_state(&mut self, path: &Path) -> io::Result<()> {
        let data = std::fs::read(path)?;
        let mut r = io::Cursor::new(data);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != OPT_MAGIC {
            return Err(bad_data(format!("bad optimizer magic in {}", path.display())));
        }
        self.step = r.read_u64::<LittleEndian>()?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        if count != self.m.len() {
            return Err(bad_data(format!(
                "optimizer state has {count} slots, model expects {}",
                self.m.len()
            )));
        }
        for i in 0..count {
            let (_, t) = read_named_tensor(&mut r)?;
            if t.shape() != self.m[i].shape() {
                return Err(bad_data(format!("optimizer m{i} shape mismatch")));
            }
            self.m[i] = t;
        }
        for i in 0..count {
            let (_, t) = read_named_tensor(&mut r)?;
            if t.shape() != self.v[i].shape() {
                return Err(bad_data(format!("optimizer v{i} shape mismatch")));
            }
            self.v[i] = t;
        }
        Ok(())
    }
}
