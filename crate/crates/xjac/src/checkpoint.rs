//! Model checkpoints: a single UTF-8 JSON file.
//!
//! Layout:
//! `{"format_version": 1, "config": {...}, "vocab": [token, ...],
//!   "params": {tensor_name: {"shape": [rows, cols], "data": [f64 row-major]}}}`
//!
//! The vocab array is id-ordered. Tensor order is fixed: `token_embedding`,
//! `positional_embedding`, then per layer `layer_NN.*` in layer order (for
//! transformer blocks: ln1.gamma, ln1.beta, attn.wq, attn.bq, attn.wk,
//! attn.bk, attn.wv, attn.bv, attn.wo, attn.bo, ln2.gamma, ln2.beta, ffn.w1,
//! ffn.b1, ffn.w2, ffn.b2), and finally `output_projection.weight` and
//! `output_projection.bias`.

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, ModelParams, SiameseModel};
use crate::tensor::Matrix;
use crate::vocab::Vocabulary;

pub const FORMAT_VERSION: u64 = 1;

pub fn checkpoint_json(model: &SiameseModel) -> Result<String> {
    let mut params = Map::new();
    for (name, _, tensor) in model.params.tensors() {
        params.insert(
            name,
            json!({
                "shape": [tensor.rows(), tensor.cols()],
                "data": tensor.data(),
            }),
        );
    }
    let doc = json!({
        "format_version": FORMAT_VERSION,
        "config": serde_json::to_value(&model.config)?,
        "vocab": model.vocab.tokens(),
        "params": Value::Object(params),
    });
    Ok(serde_json::to_string(&doc)?)
}

/// Atomically write the checkpoint (temp file + rename).
pub fn save_checkpoint(model: &SiameseModel, path: &str) -> Result<()> {
    let text = checkpoint_json(model)?;
    crate::manifest::write_atomic(path, text.as_bytes())
}

pub fn load_checkpoint(path: &str) -> Result<SiameseModel> {
    let text = std::fs::read_to_string(path)?;
    parse_checkpoint(&text)
}

pub fn parse_checkpoint(text: &str) -> Result<SiameseModel> {
    let doc: Value = serde_json::from_str(text)?;
    let version = doc
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Checkpoint("missing format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {version}"
        )));
    }
    let config: EncoderConfig = serde_json::from_value(
        doc.get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing config".into()))?,
    )?;
    let tokens: Vec<String> = serde_json::from_value(
        doc.get("vocab")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing vocab".into()))?,
    )?;
    let vocab = Vocabulary::from_tokens(tokens, true);
    let params_value = doc
        .get("params")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::Checkpoint("missing params object".into()))?;

    // Materialize the structured parameters, then fill each tensor by name.
    let mut params = ModelParams::init(&config, vocab.len(), 0);
    let names: Vec<String> = params.tensors().iter().map(|(n, _, _)| n.clone()).collect();
    for (name, (_, slot)) in names.iter().zip(params.tensors_mut()) {
        let entry = params_value
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        *slot = parse_tensor(name, entry)?;
    }
    if params_value.len() != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, file has {}",
            names.len(),
            params_value.len()
        )));
    }
    SiameseModel::from_parts(config, vocab, params)
}

fn parse_tensor(name: &str, value: &Value) -> Result<Matrix> {
    let shape = value
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: missing shape")))?;
    if shape.len() != 2 {
        return Err(Error::Checkpoint(format!(
            "tensor {name}: shape must have 2 entries"
        )));
    }
    let rows = shape[0].as_u64().unwrap_or(0) as usize;
    let cols = shape[1].as_u64().unwrap_or(0) as usize;
    let data: Vec<f64> = serde_json::from_value(
        value
            .get("data")
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: missing data")))?,
    )?;
    Matrix::from_vec(rows, cols, data)
        .map_err(|_| Error::Checkpoint(format!("tensor {name}: shape does not match data length")))
}
