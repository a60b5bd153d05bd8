//! Model archives: one safetensors file holding every named parameter plus a
//! JSON header (format version, network configs, epoch, category names)
//! stored under a single metadata key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "deltagan";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub generator: GeneratorConfig,
    pub discriminator: Option<DiscriminatorConfig>,
    /// Last completed epoch, counted from zero.
    pub epoch: usize,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Parameter path -> (shape, values).
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

fn read_store(store: &ParamStore, out: &mut BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
    for (name, var) in store.iter() {
        let values = var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
        out.insert(name.clone(), (var.dims().to_vec(), values));
    }
    Ok(())
}

fn write_store(store: &ParamStore, tensors: &BTreeMap<String, (Vec<usize>, Vec<f32>)>, device: &Device) -> Result<()> {
    for (name, var) in store.iter() {
        let (shape, values) = tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if shape.as_slice() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {shape:?}, model expects {:?}",
                var.dims()
            )));
        }
        var.set(&Tensor::from_slice(values, shape.as_slice(), device)?)?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn capture(header: CheckpointHeader, generator: &Generator, discriminator: Option<&Discriminator>) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        read_store(generator.params(), &mut tensors)?;
        if let Some(d) = discriminator {
            read_store(d.params(), &mut tensors)?;
        }
        Ok(Self { header, tensors })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.header)?;
        let raw: Vec<(&String, &Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, (shape, v))| (k, shape, v.iter().flat_map(|x| x.to_le_bytes()).collect()))
            .collect();
        let views = raw
            .iter()
            .map(|(k, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.to_vec(), bytes)
                    .map(|v| (k.as_str(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([(HEADER_KEY.to_string(), header)]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::Checkpoint("archive has no model header".into()))?;
        let header: CheckpointHeader = serde_json::from_str(header)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.iter() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("parameter `{name}` is not f32")));
            }
            let values = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name.to_string(), (view.shape().to_vec(), values));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Short content fingerprint (64-bit FNV-1a of the serialized archive).
    pub fn fingerprint(&self) -> Result<String> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_bytes()? {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        Ok(format!("{h:016x}"))
    }

    /// Copies the stored weights into an existing generator.
    pub fn restore_generator(&self, g: &Generator, device: &Device) -> Result<()> {
        if g.config() != &self.header.generator {
            return Err(Error::Checkpoint("generator config differs from the archive".into()));
        }
        write_store(g.params(), &self.tensors, device)
    }

    pub fn restore_discriminator(&self, d: &Discriminator, device: &Device) -> Result<()> {
        if Some(d.config()) != self.header.discriminator.as_ref() {
            return Err(Error::Checkpoint("discriminator config differs from the archive".into()));
        }
        write_store(d.params(), &self.tensors, device)
    }

    pub fn build_generator(&self, device: &Device) -> Result<Generator> {
        let g = Generator::new(self.header.generator.clone(), 0, device)?;
        self.restore_generator(&g, device)?;
        Ok(g)
    }

    pub fn build_discriminator(&self, device: &Device) -> Result<Option<Discriminator>> {
        let Some(cfg) = &self.header.discriminator else { return Ok(None) };
        let d = Discriminator::new(cfg.clone(), 0, device)?;
        self.restore_discriminator(&d, device)?;
        Ok(Some(d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> CheckpointHeader {
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            generator: GeneratorConfig::new(16, 16, 3).slimmed(16),
            discriminator: Some(DiscriminatorConfig::new(16, 16, 3).with_widths(vec![4, 4])),
            epoch: 2,
            categories: vec!["a".into(), "b".into(), "c".into()],
        }
    }

    #[test]
    fn save_load_save_is_bit_exact() {
        let dev = Device::Cpu;
        let h = header();
        let g = Generator::new(h.generator.clone(), 1, &dev).unwrap();
        let d = Discriminator::new(h.discriminator.clone().unwrap(), 2, &dev).unwrap();
        let ck = Checkpoint::capture(h, &g, Some(&d)).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let g2 = back.build_generator(&dev).unwrap();
        let d2 = back.build_discriminator(&dev).unwrap().unwrap();
        let again = Checkpoint::capture(back.header.clone(), &g2, Some(&d2)).unwrap();
        assert_eq!(again.to_bytes().unwrap(), bytes);
        assert_eq!(g2.params().snapshot().unwrap(), g.params().snapshot().unwrap());
    }

    #[test]
    fn mismatched_archives_are_rejected() {
        let dev = Device::Cpu;
        let h = CheckpointHeader { discriminator: None, ..header() };
        let g = Generator::new(h.generator.clone(), 1, &dev).unwrap();
        let mut ck = Checkpoint::capture(h, &g, None).unwrap();
        assert!(ck.build_discriminator(&dev).unwrap().is_none());
        ck.tensors.remove("generator.color_head.bias");
        assert!(matches!(ck.build_generator(&dev), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"not an archive").is_err());
    }
}
