//! File formats shared with the training side: `D3W1` weights, dataset
//! JSONL and the checkpoint manifest. Fixtures are assembled byte by byte.

use d3_core::harness::{CheckpointManifest, TaskData, TaskName};
use d3_core::{Model, ModelError};

const HEADER: [u32; 7] = [5, 4, 2, 2, 6, 16, 1];

/// vocab 5, d 4, two layers, two heads, dff 6, max_seq 16; tensor values
/// count up from 0 in file order.
fn handmade(tied: bool) -> (Vec<u8>, usize) {
    let mut header = HEADER;
    header[6] = tied as u32;
    let (v, d, l, f) = (5, 4, 2, 6);
    let per_layer = d + 4 * d * d + d + d * f + f * d;
    let n = v * d + l * per_layer + d + if tied { 0 } else { d * v };
    let mut bytes = b"D3W1".to_vec();
    for h in header {
        bytes.extend_from_slice(&h.to_le_bytes());
    }
    for i in 0..n {
        bytes.extend_from_slice(&(i as f32).to_le_bytes());
    }
    (bytes, n)
}

#[test]
fn tensors_are_read_in_file_order() {
    let (bytes, n) = handmade(true);
    let m = Model::from_bytes(&bytes).unwrap();
    assert_eq!(m.config.vocab_size, 5);
    assert!(m.config.tied_lm_head && m.lm_head.is_none());
    assert_eq!(m.token_embedding[0], 0.0);
    // embedding 20, then attn_norm 4, wq 16, wk 16, wv 16, wo 16, mlp_norm 4, up 24, down 24
    let l0 = &m.layers[0];
    assert_eq!(l0.attn_norm[0], 20.0);
    assert_eq!(l0.wq[0], 24.0);
    assert_eq!(l0.wk[0], 40.0);
    assert_eq!(l0.wv[0], 56.0);
    assert_eq!(l0.wo[0], 72.0);
    assert_eq!(l0.mlp_norm[0], 88.0);
    assert_eq!(l0.w_up[0], 92.0);
    assert_eq!(l0.w_down[0], 116.0);
    assert_eq!(m.layers[1].attn_norm[0], 140.0);
    assert_eq!(*m.final_norm.last().unwrap(), (n - 1) as f32);
    assert_eq!(m.to_bytes(), bytes);
}

#[test]
fn untied_files_carry_the_head_last() {
    let (bytes, n) = handmade(false);
    let m = Model::from_bytes(&bytes).unwrap();
    let head = m.lm_head.as_ref().unwrap();
    assert_eq!(head.len(), 4 * 5);
    assert_eq!(*head.last().unwrap(), (n - 1) as f32);
}

#[test]
fn malformed_files_are_rejected_with_the_tensor_name() {
    let (mut bytes, _) = handmade(true);
    bytes.truncate(bytes.len() - 4);
    assert_eq!(
        Model::from_bytes(&bytes),
        Err(ModelError::TruncatedFile {
            tensor: "final_norm".into()
        })
    );
    let (mut bytes, _) = handmade(true);
    bytes.extend_from_slice(&[0; 4]);
    assert!(matches!(
        Model::from_bytes(&bytes),
        Err(ModelError::DimensionMismatch { .. })
    ));
    let (mut bytes, _) = handmade(true);
    bytes[32 + 4 * 25..32 + 4 * 26].copy_from_slice(&f32::INFINITY.to_le_bytes());
    assert_eq!(
        Model::from_bytes(&bytes),
        Err(ModelError::NonFiniteWeight {
            tensor: "layers.0.wq".into(),
            index: 1
        })
    );
    let (mut bytes, _) = handmade(true);
    bytes[0] = b'X';
    assert!(matches!(
        Model::from_bytes(&bytes),
        Err(ModelError::BadMagic { .. })
    ));
}

#[test]
fn dataset_jsonl_tolerates_extra_keys() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("train.jsonl"),
        "{\"input\": \"cba\", \"target\": \"abc\", \"id\": 1}\n\n{\"input\": \"ed\", \"target\": \"de\"}\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("test.jsonl"),
        "{\"input\": \"zy\", \"target\": \"yz\"}\n",
    )
    .unwrap();
    let data = TaskData::load_dir(TaskName::Sort, dir.path()).unwrap();
    assert_eq!(data.train.len(), 2);
    assert_eq!(data.test[0].target, "yz");

    std::fs::write(dir.path().join("test.jsonl"), "{\"input\": \"zy\"}\n").unwrap();
    let err = TaskData::load_dir(TaskName::Sort, dir.path()).unwrap_err();
    assert!(err.to_string().contains("test.jsonl:1"));
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    std::fs::write(
        &path,
        r#"{"checkpoints": [{"step": 500, "path": "/abs/ck500.d3w"}, {"step": 0, "path": "ck0.d3w"}]}"#,
    )
    .unwrap();
    let m = CheckpointManifest::load(&path).unwrap();
    assert_eq!(
        m.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(),
        vec![0, 500]
    );
    assert_eq!(m.checkpoints[0].path, dir.path().join("ck0.d3w"));
    assert_eq!(m.checkpoints[1].path.to_str(), Some("/abs/ck500.d3w"));
}
