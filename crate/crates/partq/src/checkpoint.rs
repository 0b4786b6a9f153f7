//! Self-describing binary checkpoint container.
//!
//! Layout: magic, version, a JSON metadata blob (model config plus the run
//! config it was trained with), then named tensors for parameters and
//! buffers. Tensors are keyed by name, so a checkpoint written by one build
//! reloads into a freshly constructed model with identical layer naming.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ParamStore};
use crate::Scalar;

const MAGIC: &[u8; 8] = b"PARTQCKP";
const VERSION: u32 = 1;

/// Metadata stored alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Full run configuration for reproducibility; optional because indexes
    /// can be built from hand-constructed models.
    pub run: Option<RunConfig>,
    /// Seed the model parameters were initialized with.
    pub init_seed: u64,
    /// Epochs actually trained.
    pub trained_epochs: usize,
}

fn write_store<F: Scalar>(buf: &mut Vec<u8>, store: &ParamStore<F>) {
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, value) in store.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
        for &d in value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in value.iter() {
            v.write_le(buf);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::format("truncated checkpoint"));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_entries<F: Scalar>(r: &mut Reader) -> Result<Vec<(String, ArrayD<F>)>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format("invalid tensor name"))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(F::read_le(r.take(F::WIDTH)?));
        }
        out.push((
            name,
            ArrayD::from_shape_vec(shape, data).map_err(|e| Error::format(e.to_string()))?,
        ));
    }
    Ok(out)
}

/// Serialize a model (and optional run config) to a checkpoint file.
pub fn save<F: Scalar>(
    path: &Path,
    model: &Model<F>,
    run: Option<&RunConfig>,
    init_seed: u64,
    trained_epochs: usize,
) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.cfg().clone(),
        run: run.cloned(),
        init_seed,
        trained_epochs,
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Serde(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(F::DTYPE);
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    write_store(&mut buf, model.params());
    write_store(&mut buf, model.buffers());
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Load a checkpoint into a freshly built model. Every stored tensor must
/// match a registered tensor by name and shape.
pub fn load<F: Scalar>(path: &Path) -> Result<(Model<F>, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, off: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let dtype = r.take(1)?[0];
    if dtype != F::DTYPE {
        return Err(Error::format(format!(
            "checkpoint dtype {dtype} does not match requested scalar {}",
            F::DTYPE
        )));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Serde(e.to_string()))?;
    let params = read_entries::<F>(&mut r)?;
    let buffers = read_entries::<F>(&mut r)?;
    if r.off != bytes.len() {
        return Err(Error::format("trailing bytes in checkpoint"));
    }

    let mut model = Model::<F>::new(meta.model.clone(), meta.init_seed)?;
    let assign = |store: &mut ParamStore<F>, entries: Vec<(String, ArrayD<F>)>| -> Result<()> {
        for (name, value) in entries {
            let id = store
                .id_of(&name)
                .ok_or_else(|| Error::format(format!("unknown tensor `{name}` in checkpoint")))?;
            if store.value(id).shape() != value.shape() {
                return Err(Error::format(format!(
                    "tensor `{name}` shape mismatch: model {:?}, checkpoint {:?}",
                    store.value(id).shape(),
                    value.shape()
                )));
            }
            *store.value_mut(id) = value;
        }
        Ok(())
    };
    assign(model.params_mut(), params)?;
    assign(model.buffers_mut(), buffers)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::Mode;
    use ndarray::Array4;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.backbone.input_height = 32;
        cfg.backbone.input_width = 16;
        cfg.backbone.output_channels = 8;
        cfg.parts = 2;
        cfg.embed_dim = 8;
        cfg.global_dim = 8;
        cfg.num_classes = 3;
        cfg
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let cfg = tiny_cfg();
        let mut model = Model::<f32>::new(cfg, 77).unwrap();
        let images = Array4::<f32>::from_shape_fn((2, 3, 32, 16), |(i, c, y, x)| {
            ((i * 3 + c * 7 + y + x) % 11) as f32 * 0.05
        });
        model.calibrate(images.view()).unwrap();

        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.ckpt");
        save(&path, &model, None, 77, 0).unwrap();
        let (restored, meta) = load::<f32>(&path).unwrap();
        assert_eq!(meta.init_seed, 77);
        assert!(restored.calibrated());

        let a = model.forward(images.view(), Mode::Eval).unwrap();
        let b = restored.forward(images.view(), Mode::Eval).unwrap();
        assert_eq!(
            a.session.tape.value(a.nodes.quality_mat),
            b.session.tape.value(b.nodes.quality_mat)
        );
        assert_eq!(
            a.session.tape.value(a.nodes.global_parts),
            b.session.tape.value(b.nodes.global_parts)
        );
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTHINGY").unwrap();
        assert!(load::<f32>(&path).is_err());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let cfg = tiny_cfg();
        let model = Model::<f32>::new(cfg, 1).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.ckpt");
        save(&path, &model, None, 1, 0).unwrap();
        assert!(load::<f64>(&path).is_err());
    }
}
