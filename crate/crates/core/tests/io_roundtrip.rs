//! File format round trips through disk.

mod common;

use std::collections::BTreeMap;

use forge_core::io::*;
use forge_core::trainer::{
    checkpoint_digest, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, AttentivePoolingHead,
    Checkpoint, LayeredEncoder, ParamBlocks, SpeakerNet,
};
use forge_core::{EmbeddingMatrix, Error, FeatureSet, Matrix, PseudoLabelMap, Trial, TrialList, UtteranceId};
use proptest::prelude::*;

use common::*;

fn ids(n: usize) -> Vec<UtteranceId> {
    (0..n).map(|i| UtteranceId::new(format!("spk{}/utt-{i}", i % 3)).unwrap()).collect()
}

fn checkpoint(seed: u64, with_weights: bool) -> Checkpoint {
    let mut net = SpeakerNet::new(
        LayeredEncoder::pretrained(5, 6, 3, 0.2, seed).unwrap(),
        AttentivePoolingHead::fresh(3, 6, 4, seed),
    )
    .unwrap();
    net.quantize();
    let class_weights = with_weights.then(|| {
        let mut m = Matrix::from_vec(7, 4, normals(&mut rng(seed), 28)).unwrap();
        m.quantize();
        m
    });
    Checkpoint { net, class_weights }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn embeddings_survive_encoding(n in 1usize..30, d in 1usize..9, seed in 0u64..1000) {
        let data: Vec<f32> = normals(&mut rng(seed), n * d).iter().map(|&v| v as f32).collect();
        let m = EmbeddingMatrix::new(ids(n), d, data).unwrap();
        let back = decode_embeddings(&encode_embeddings(&m)).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn features_survive_encoding(n in 1usize..12, d in 1usize..6, seed in 0u64..1000) {
        let mut r = rng(seed);
        let seqs: Vec<Matrix> = (0..n)
            .map(|i| {
                let frames = 1 + (i * 7 + seed as usize) % 9;
                let v: Vec<f64> = normals(&mut r, frames * d).iter().map(|&x| x as f32 as f64).collect();
                Matrix::from_vec(frames, d, v).unwrap()
            })
            .collect();
        let f = FeatureSet::new(ids(n), d, seqs).unwrap();
        prop_assert_eq!(decode_features(&encode_features(&f)).unwrap(), f);
    }

    #[test]
    fn labels_and_trials_survive_text(n in 2usize..40, k in 1usize..6) {
        let map: BTreeMap<UtteranceId, usize> = ids(n).into_iter().enumerate().map(|(i, id)| (id, i % k.min(n))).collect();
        let labels = PseudoLabelMap::new(map, 3).unwrap();
        prop_assert_eq!(parse_labels(&format_labels(&labels), 3).unwrap(), labels);

        let all = ids(n);
        let rows: Vec<Trial> = (1..n)
            .map(|i| Trial { is_target: i % 2 == 0, enroll: all[0].clone(), test: all[i].clone() })
            .collect();
        let trials = TrialList::new(rows).unwrap();
        prop_assert_eq!(parse_trials(&format_trials(&trials)).unwrap(), trials);
    }

    #[test]
    fn scored_rows_keep_full_precision(scores in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
        let all = ids(scores.len() + 1);
        let rows: Vec<ScoredRow> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoredRow { enroll: all[0].clone(), test: all[i + 1].clone(), is_target: i % 3 == 0, score: s })
            .collect();
        prop_assert_eq!(parse_scored(&format_scored(&rows)).unwrap(), rows);
    }
}

#[test]
fn checkpoint_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    for (seed, with_weights) in [(1, true), (2, false)] {
        let ckpt = checkpoint(seed, with_weights);
        let path = dir.path().join(format!("m{seed}.ckpt"));
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.net, ckpt.net);
        assert_eq!(back.class_weights, ckpt.class_weights);
        assert_eq!(checkpoint_digest(&back), checkpoint_digest(&ckpt));
        // No temp file left behind by the atomic write.
        assert!(!dir.path().join(format!("m{seed}.ckpt.tmp")).exists());
    }
}

#[test]
fn digest_changes_with_any_parameter() {
    let a = checkpoint(3, true);
    let mut b = a.clone();
    let mut flat = b.net.flat();
    flat[0] += 0.5;
    b.net.set_flat(&flat).unwrap();
    assert_ne!(checkpoint_digest(&a), checkpoint_digest(&b));
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = encode_checkpoint(&checkpoint(4, true));
    for cut in 0..bytes.len() {
        assert!(decode_checkpoint(&bytes[..cut]).is_err(), "prefix of {cut} bytes decoded");
    }
    let emb = encode_embeddings(&EmbeddingMatrix::new(ids(3), 2, vec![0.5; 6]).unwrap());
    for cut in 0..emb.len() {
        assert!(decode_embeddings(&emb[..cut]).is_err());
    }
    let mut extra = emb.clone();
    extra.push(0);
    assert!(matches!(decode_embeddings(&extra), Err(Error::TruncatedData(_))));
}

#[test]
fn files_on_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = EmbeddingMatrix::new(ids(4), 3, (0..12).map(|v| v as f32 * 0.25).collect()).unwrap();
    let p = dir.path().join("e.emb");
    save_embeddings(&m, &p).unwrap();
    assert_eq!(load_embeddings(&p).unwrap(), m);

    let labels = PseudoLabelMap::compacted(&ids(4), &[9, 2, 9, 4], 1).unwrap();
    let p = dir.path().join("l.tsv");
    save_labels(&labels, &p).unwrap();
    assert_eq!(load_labels(&p, 1).unwrap(), labels);

    assert!(matches!(load_labels(&dir.path().join("missing.tsv"), 0), Err(Error::Io { .. })));
}
