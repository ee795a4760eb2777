use std::fs;
use std::path::Path;

use dfcon::corpus::Corpus;
use dfcon::error::Error;
use dfcon::model::{ConsistencyModel, ModelKind};
use dfcon::motion::{load_landmark_dir, load_landmarks, save_landmarks, synth_landmarks, LandmarkSynthConfig};
use dfcon::streams::{load_stream, save_stream, FrameFeatureSequence, Modality, StreamTriple};
use dfcon::synthgen::{gen_corpus, SynthConfig};
use dfcon::trainer::{train_model, TrainConfig};

fn seq() -> FrameFeatureSequence {
    let frames: Vec<f32> = (0..12).map(|k| k as f32 * 0.1 - 0.5).collect();
    FrameFeatureSequence::new(Modality::Visual, 3, 25.0, frames, "id7", "src2").unwrap()
}

fn edit_manifest(path: &Path, from: &str, to: &str) {
    let text = fs::read_to_string(path).unwrap();
    assert!(text.contains(from), "{from} not in manifest");
    fs::write(path, text.replace(from, to)).unwrap();
}

#[test]
fn stream_round_trip_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let s = seq();
    let m = save_stream(&s, tmp.path()).unwrap();
    assert_eq!(m.file_name().unwrap(), "visual.json");
    assert_eq!(fs::metadata(tmp.path().join("visual.f32")).unwrap().len(), 48);
    assert_eq!(load_stream(&m).unwrap(), s);
}

#[test]
fn wrong_byte_order_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let m = save_stream(&seq(), tmp.path()).unwrap();
    edit_manifest(&m, "\"little\"", "\"big\"");
    let err = load_stream(&m).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn payload_size_mismatch_reports_both_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let m = save_stream(&seq(), tmp.path()).unwrap();
    edit_manifest(&m, "\"num_frames\": 4", "\"num_frames\": 5");
    match load_stream(&m).unwrap_err() {
        Error::SizeMismatch { expected, found, .. } => assert_eq!((expected, found), (60, 48)),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn nan_in_payload_is_located() {
    let tmp = tempfile::tempdir().unwrap();
    let m = save_stream(&seq(), tmp.path()).unwrap();
    let payload = tmp.path().join("visual.f32");
    let mut bytes = fs::read(&payload).unwrap();
    bytes[28..32].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&payload, bytes).unwrap();
    match load_stream(&m).unwrap_err() {
        Error::NonFinite { frame, column, offset } => assert_eq!((frame, column, offset), (2, 1, 28)),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn unknown_manifest_fields_and_versions_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let m = save_stream(&seq(), tmp.path()).unwrap();
    edit_manifest(&m, "\"version\": 1", "\"version\": 99");
    assert!(matches!(load_stream(&m).unwrap_err(), Error::Version { found: 99, .. }));
    edit_manifest(&m, "\"version\": 99", "\"version\": 1, \"extra\": 0");
    assert!(matches!(load_stream(&m).unwrap_err(), Error::Format { .. }));
}

#[test]
fn triple_load_checks_the_modality() {
    let tmp = tempfile::tempdir().unwrap();
    let s = seq();
    let triple = StreamTriple {
        identity: FrameFeatureSequence { modality: Modality::Identity, ..s.clone() },
        visual: s.clone(),
        audio: FrameFeatureSequence { modality: Modality::Audio, frame_rate_hz: 50.0, ..s },
    };
    triple.save(tmp.path()).unwrap();
    assert_eq!(StreamTriple::load(tmp.path()).unwrap(), triple);
    edit_manifest(&tmp.path().join("audio.json"), "\"audio\"", "\"visual\"");
    assert!(StreamTriple::load(tmp.path()).is_err());
}

#[test]
fn corpus_round_trip_keeps_grouping_and_order() {
    let cfg = SynthConfig {
        num_identities: 3,
        sources_per_identity: 2,
        frames_per_source: 60,
        eval_streams: 1,
        ..SynthConfig::default()
    };
    let corpus = gen_corpus(&cfg).unwrap();
    assert_eq!((corpus.len(), corpus.num_triples()), (3, 6));
    let tmp = tempfile::tempdir().unwrap();
    corpus.save_dir(tmp.path()).unwrap();
    let back = Corpus::load_dir(tmp.path()).unwrap();
    assert_eq!(back, corpus);
    let labels: Vec<&str> = back.identities().iter().map(|e| e.label.as_str()).collect();
    let mut sorted = labels.clone();
    sorted.sort();
    assert_eq!(labels, sorted);
    assert!(Corpus::load_dir(tmp.path().join("nope")).is_err());
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let corpus = gen_corpus(&SynthConfig {
        num_identities: 8,
        sources_per_identity: 4,
        frames_per_source: 100,
        eval_streams: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        total_steps: 3,
        embed_dim: 8,
        ..TrainConfig::default()
    };
    let model = train_model(&corpus, &cfg, ModelKind::Cross).unwrap().model;
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("cross.ckpt");
    model.save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"DFCONCK1");
    assert_eq!(ConsistencyModel::load(&path).unwrap(), model);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(ConsistencyModel::from_bytes(&bad, &path), Err(Error::Format { .. })));
    let short = &bytes[..bytes.len() - 4];
    assert!(matches!(ConsistencyModel::from_bytes(short, &path), Err(Error::SizeMismatch { .. })));
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(ConsistencyModel::from_bytes(&nan, &path).is_err());
}

#[test]
fn landmark_round_trip() {
    let seqs = synth_landmarks(&LandmarkSynthConfig {
        num_identities: 2,
        sources_per_identity: 2,
        frames: 5,
        landmarks: 4,
        ..LandmarkSynthConfig::default()
    })
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    for (k, s) in seqs.iter().enumerate() {
        save_landmarks(s, tmp.path(), &format!("seq{k}")).unwrap();
    }
    assert_eq!(load_landmarks(tmp.path().join("seq1.json")).unwrap(), seqs[1]);
    let mut all = load_landmark_dir(tmp.path()).unwrap();
    all.sort_by(|a, b| (&a.identity_label, &a.source_label).cmp(&(&b.identity_label, &b.source_label)));
    let mut expect = seqs.clone();
    expect.sort_by(|a, b| (&a.identity_label, &a.source_label).cmp(&(&b.identity_label, &b.source_label)));
    assert_eq!(all, expect);

    edit_manifest(&tmp.path().join("seq0.json"), "\"dim\": 12", "\"dim\": 10");
    assert!(load_landmarks(tmp.path().join("seq0.json")).is_err());
}
