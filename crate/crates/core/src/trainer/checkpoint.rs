//! Network checkpoints.
//!
//! ```text
//! b"CKP1" | u32 LE layers L | u32 LE input dim | u32 LE hidden dim
//!         | u32 LE embedding dim | u32 LE classes C (0 = none)
//!         | f32 LE parameters: encoder, head, class weights
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::embedding::Matrix;
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_bytes, Reader};

use super::network::{AttentivePoolingHead, LayeredEncoder, ParamBlocks, SpeakerNet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: SpeakerNet,
    pub class_weights: Option<Matrix>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let enc = &ckpt.net.encoder;
    let classes = ckpt.class_weights.as_ref().map_or(0, |w| w.rows());
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [enc.num_layers(), enc.input_dim(), enc.hidden_dim(), ckpt.net.embed_dim(), classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut blocks = ckpt.net.blocks();
    if let Some(w) = &ckpt.class_weights {
        blocks.push(w.as_slice());
    }
    for b in blocks {
        for v in b {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let layers = r.u32("layer count")? as usize;
    let input = r.u32("input dim")? as usize;
    let hidden = r.u32("hidden dim")? as usize;
    let embed = r.u32("embedding dim")? as usize;
    let classes = r.u32("class count")? as usize;
    if layers == 0 || input == 0 || hidden == 0 || embed == 0 {
        return Err(Error::ShapeMismatch("checkpoint header has a zero dimension".into()));
    }
    let mut net = SpeakerNet::new(
        LayeredEncoder::zeros(input, hidden, layers),
        AttentivePoolingHead::zeros(layers, hidden, embed),
    )?;
    let values: Vec<f64> = r
        .f32s(net.num_params(), "network parameters")?
        .into_iter()
        .map(f64::from)
        .collect();
    net.set_flat(&values)?;
    let class_weights = if classes > 0 {
        let w: Vec<f64> = r
            .f32s(classes * embed, "class weights")?
            .into_iter()
            .map(f64::from)
            .collect();
        Some(Matrix::from_vec(classes, embed, w)?)
    } else {
        None
    };
    r.finish()?;
    if !net.all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(Checkpoint { net, class_weights })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?)
}

/// Hex SHA-256 of the encoded checkpoint.
pub fn checkpoint_digest(ckpt: &Checkpoint) -> String {
    Sha256::digest(encode_checkpoint(ckpt))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_after_quantization() {
        let mut net = SpeakerNet::new(
            LayeredEncoder::pretrained(3, 4, 2, 0.1, 5).unwrap(),
            AttentivePoolingHead::fresh(2, 4, 3, 5),
        )
        .unwrap();
        net.quantize();
        let mut w = Matrix::from_rows(&[vec![0.5, 0.25, -1.0], vec![0.1, 0.2, 0.3]]).unwrap();
        w.quantize();
        let ckpt = Checkpoint {
            net,
            class_weights: Some(w),
        };
        let back = decode_checkpoint(&encode_checkpoint(&ckpt)).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(checkpoint_digest(&back), checkpoint_digest(&ckpt));
    }

    #[test]
    fn corrupt_inputs() {
        assert!(matches!(decode_checkpoint(b""), Err(Error::BadMagic { .. })));
        let net = SpeakerNet::new(LayeredEncoder::zeros(2, 2, 2), AttentivePoolingHead::zeros(2, 2, 2)).unwrap();
        let mut bytes = encode_checkpoint(&Checkpoint { net, class_weights: None });
        bytes.pop();
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::TruncatedData(_))));
    }
}
