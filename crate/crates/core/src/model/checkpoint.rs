use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::io::{read_text, write_text};
use crate::numcore::{Params, Tensor};

const FORMAT: &str = "visgeo-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    version: u32,
    config: ModelConfig,
    params: BTreeMap<String, StoredTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params,
}

/// JSON text; every `f64` is written in shortest round-trip form, so
/// loading restores the exact bits.
pub fn save_checkpoint(ckpt: &Checkpoint) -> Result<String> {
    let stored = Stored {
        format: FORMAT.into(),
        version: VERSION,
        config: ckpt.config.clone(),
        params: ckpt
            .params
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect(),
    };
    serde_json::to_string(&stored).map_err(|e| Error::Parse(format!("checkpoint encode: {e}")))
}

pub fn load_checkpoint(text: &str) -> Result<Checkpoint> {
    let stored: Stored = serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
    if stored.format != FORMAT || stored.version != VERSION {
        return Err(Error::Parse(format!(
            "unsupported checkpoint {} v{}",
            stored.format, stored.version
        )));
    }
    stored.config.validate()?;
    let params = stored
        .params
        .into_iter()
        .map(|(k, t)| Ok((k, Tensor::new(t.shape, t.data)?)))
        .collect::<Result<Params>>()?;
    Ok(Checkpoint {
        config: stored.config,
        params,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_text(path, &save_checkpoint(ckpt)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(&read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn round_trip_is_bitwise() {
        let config = ModelConfig {
            hidden_dim: 8,
            n_heads: 2,
            ..ModelConfig::default()
        };
        let mut params = init_params(&config, 5.123456789012345).unwrap();
        params.get_mut("decoder.out").unwrap().data_mut()[0] = f64::MIN_POSITIVE / 3.0;
        let ckpt = Checkpoint { config, params };
        let text = save_checkpoint(&ckpt).unwrap();
        let back = load_checkpoint(&text).unwrap();
        for (k, t) in &ckpt.params {
            assert!(back.params[k].bitwise_eq(t), "{k}");
        }
        assert_eq!(back.config, ckpt.config);
        assert_eq!(save_checkpoint(&back).unwrap(), text);
        assert!(load_checkpoint("{}").is_err());
    }
}
