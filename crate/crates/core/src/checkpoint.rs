//! Self-describing model checkpoints: a text key-value header followed by
//! little-endian `f64` parameter blocks in store order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matcher::{Model, ModelConfig, ModelVariant};
use crate::numerics::{ParameterStore, Tensor};
use crate::snli::Label;
use crate::training::INIT_SCHEME;

pub const MAGIC: &str = "mlstm-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const END: &str = "end_header";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub init: String,
    /// Prepared-data directory the model was trained against.
    pub prepared: Option<String>,
    /// SHA-256 of the embedding matrix used in training.
    pub embedding_checksum: Option<String>,
    /// Epoch the parameters come from, when produced by training.
    pub epoch: Option<usize>,
    pub store: ParameterStore,
}

fn class_order() -> String {
    Label::ALL.iter().map(|l| l.as_str()).collect::<Vec<_>>().join(",")
}

fn check_value(key: &str, v: &str) -> Result<()> {
    if v.contains(['\n', '\t']) || v.is_empty() {
        return Err(Error::InvalidInput(format!("checkpoint field {key} must be a non-empty single-line value")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(model: &Model, seed: u64) -> Self {
        Self {
            config: model.config,
            seed,
            init: INIT_SCHEME.to_string(),
            prepared: None,
            embedding_checksum: None,
            epoch: None,
            store: model.store.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_store(self.config, self.store)
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_store(self.config, self.store.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let opt = |v: &Option<String>| v.clone().unwrap_or_else(|| "-".into());
        let mut fields: Vec<(&str, String)> = vec![
            ("format_version", FORMAT_VERSION.to_string()),
            ("variant", self.config.variant.to_string()),
            ("d", self.config.hidden.to_string()),
            ("l", self.config.embed_dim.to_string()),
            ("d_out", self.config.state_dim().to_string()),
            ("shared_encoder", self.config.shared_encoder.to_string()),
            ("class_order", class_order()),
            ("seed", self.seed.to_string()),
            ("init", self.init.clone()),
            ("prepared", opt(&self.prepared)),
            ("embedding_sha256", opt(&self.embedding_checksum)),
            ("epoch", self.epoch.map_or_else(|| "-".into(), |e| e.to_string())),
            ("params", self.store.len().to_string()),
        ];
        for (name, t) in self.store.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            fields.push(("param", format!("{name}\t{}", shape.join("x"))));
        }
        let mut header = format!("{MAGIC}\n");
        for (k, v) in &fields {
            if *k != "param" {
                check_value(k, v)?;
            }
            header.push_str(&format!("{k}\t{v}\n"));
        }
        header.push_str(END);
        header.push('\n');

        let mut bytes = header.into_bytes();
        for (_, t) in self.store.iter() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path)?, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut line_no = 0;
        let mut next_line = || -> Result<(usize, String)> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::parse(path, line_no + 1, "truncated header"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| Error::parse(path, line_no + 1, "header is not UTF-8"))?
                .to_string();
            pos += end + 1;
            line_no += 1;
            Ok((line_no, line))
        };

        let (n, magic) = next_line()?;
        if magic != MAGIC {
            return Err(Error::parse(path, n, "not a checkpoint file"));
        }
        let mut get = |key: &str| -> Result<(usize, String)> {
            let (n, line) = next_line()?;
            match line.split_once('\t') {
                Some((k, v)) if k == key => Ok((n, v.to_string())),
                _ => Err(Error::parse(path, n, format!("expected field {key:?}"))),
            }
        };
        let num = |(n, v): (usize, String)| -> Result<usize> { v.parse().map_err(|_| Error::parse(path, n, format!("bad number {v:?}"))) };
        let opt = |v: String| if v == "-" { None } else { Some(v) };

        let (n, version) = get("format_version")?;
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::Incompatible(format!(
                "checkpoint format version {version} (line {n}); this build reads version {FORMAT_VERSION}"
            )));
        }
        let (n, variant) = get("variant")?;
        let variant: ModelVariant = variant.parse().map_err(|e: Error| Error::parse(path, n, e.to_string()))?;
        let hidden = num(get("d")?)?;
        let embed_dim = num(get("l")?)?;
        let d_out = get("d_out")?;
        let (n, shared) = get("shared_encoder")?;
        let shared_encoder = shared.parse::<bool>().map_err(|_| Error::parse(path, n, "bad shared_encoder"))?;
        let config = ModelConfig {
            variant,
            hidden,
            embed_dim,
            shared_encoder,
        };
        if num(d_out.clone())? != config.state_dim() {
            return Err(Error::parse(path, d_out.0, "d_out inconsistent with variant and dims"));
        }
        let (n, order) = get("class_order")?;
        if order != class_order() {
            return Err(Error::Incompatible(format!("class order {order:?} (line {n}) differs from {:?}", class_order())));
        }
        let (n, seed) = get("seed")?;
        let seed = seed.parse().map_err(|_| Error::parse(path, n, "bad seed"))?;
        let (_, init) = get("init")?;
        let (_, prepared) = get("prepared")?;
        let (_, checksum) = get("embedding_sha256")?;
        let (_, epoch) = get("epoch")?;
        let epoch = match opt(epoch) {
            None => None,
            Some(e) => Some(num((0, e))?),
        };
        let count = num(get("params")?)?;
        let mut layout = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, v) = get("param")?;
            let (name, shape) = v.split_once('\t').ok_or_else(|| Error::parse(path, n, "bad param line"))?;
            let shape: Vec<usize> = shape
                .split('x')
                .map(|s| s.parse().map_err(|_| Error::parse(path, n, format!("bad shape {shape:?}"))))
                .collect::<Result<_>>()?;
            layout.push((name.to_string(), shape));
        }
        let (n, end) = next_line()?;
        if end != END {
            return Err(Error::parse(path, n, "expected end of header"));
        }

        let expected: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>() * 8;
        if bytes.len() - pos != expected {
            return Err(Error::parse(
                path,
                n,
                format!("expected {expected} bytes of parameters, found {}", bytes.len() - pos),
            ));
        }
        let mut store = ParameterStore::new();
        for (name, shape) in layout {
            let len: usize = shape.iter().product();
            let data = bytes[pos..pos + 8 * len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            pos += 8 * len;
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(Self {
            config,
            seed,
            init,
            prepared: opt(prepared),
            embedding_checksum: opt(checksum),
            epoch,
            store,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        for variant in ModelVariant::ALL {
            let model = Model::new(ModelConfig::new(variant, 3, 4), 9).unwrap();
            let mut ck = Checkpoint::new(&model, 9);
            ck.prepared = Some("/data/prepared".into());
            ck.embedding_checksum = Some("ab".repeat(32));
            ck.epoch = Some(4);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
            let m = back.into_model().unwrap();
            assert_eq!(m.count_parameters(), model.count_parameters());
        }
    }

    #[test]
    fn version_mismatch_is_incompatible() {
        let model = Model::new(ModelConfig::new(ModelVariant::Mlstm, 2, 3), 0).unwrap();
        let bytes = Checkpoint::new(&model, 0).to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("format_version\t1", "format_version\t2", 1);
        let err = Checkpoint::from_bytes(text.as_bytes(), Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let model = Model::new(ModelConfig::new(ModelVariant::Mlstm, 2, 3), 0).unwrap();
        let bytes = Checkpoint::new(&model, 0).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8], Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(b"garbage\n", Path::new("x")).is_err());
    }

    #[test]
    fn header_is_readable_text() {
        let model = Model::new(ModelConfig::new(ModelVariant::MlstmBilstm, 2, 3), 0).unwrap();
        let bytes = Checkpoint::new(&model, 5).to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("mlstm-checkpoint\nformat_version\t1\nvariant\tmlstm_bilstm\nd\t2\nl\t3\nd_out\t4\n"));
        assert!(text.contains("class_order\tentailment,contradiction,neutral\n"));
        assert!(text.contains("param\tencoder.fwd.W_i\t2x3\n"));
    }
}
