use nisp_core::cbunet::{encode_weights, load_weights, load_weights_for, save_weights, CBUnet, CBUnetConfig};
use nisp_core::imaging::io::{load_raw, read_meta, read_pgm, write_meta, write_pgm, RawFrame};
use nisp_core::train::synth::{synth_dataset, SynthConfig};
use nisp_core::train::{load_dataset, write_sample, AnnotationRecord};
use nisp_core::Error;
use nisp_testkit::{criteria, gen};

#[test]
fn in_memory_round_trips() {
    for o in criteria::format_roundtrips(6) {
        println!("{}", o.line());
        assert!(o.pass, "{}", o.line());
    }
}

#[test]
fn weight_file_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.cbuw");
    let model = CBUnet::new(CBUnetConfig::tiny(), 11).unwrap();
    save_weights(&model, &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(criteria::fingerprint(&back.stage1.params), criteria::fingerprint(&model.stage1.params));
    assert_eq!(criteria::fingerprint(&back.stage2.params), criteria::fingerprint(&model.stage2.params));
    assert_eq!(std::fs::read(&path).unwrap(), encode_weights(&back).unwrap());

    let mut other = CBUnetConfig::tiny();
    other.attention_enabled = false;
    assert!(matches!(load_weights_for(&path, &other), Err(Error::Config(_))));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_weights(&path), Err(Error::Format(_))));
}

#[test]
fn pgm_and_sidecar_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = nisp_testkit::rng(4);
    let frame = RawFrame { width: 6, height: 4, maxval: 4095, samples: (0..24).map(|i| (i * 170) as u16).collect() };
    let meta = gen::meta(&mut rng);
    let pgm = dir.path().join("a.pgm");
    write_pgm(&pgm, &frame).unwrap();
    write_meta(&dir.path().join("a.meta.json"), &meta).unwrap();
    assert_eq!(read_pgm(&pgm).unwrap(), frame);
    assert_eq!(read_meta(&dir.path().join("a.meta.json")).unwrap(), meta);
    let first = std::fs::read(&pgm).unwrap();
    write_pgm(&pgm, &read_pgm(&pgm).unwrap()).unwrap();
    assert_eq!(std::fs::read(&pgm).unwrap(), first);
    let bayer = load_raw(&pgm, None).unwrap();
    assert_eq!((bayer.width, bayer.height), (6, 4));
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_dataset(&SynthConfig { count: 3, width: 32, height: 32, seed: 1 }).unwrap();
    for s in &samples {
        write_sample(dir.path(), &s.frame, &s.pair).unwrap();
    }
    let loaded = load_dataset(dir.path(), true).unwrap();
    assert_eq!(loaded.len(), 3);
    for (a, b) in loaded.iter().zip(&samples) {
        assert_eq!(a.id, b.pair.id);
        assert_eq!(a.raw, b.pair.raw);
        assert_eq!(a.target, b.pair.target);
        assert_eq!(a.annotation, b.pair.annotation);
    }
    let rec = loaded[0].annotation.clone().unwrap();
    assert_eq!(AnnotationRecord::decode(&rec.encode()).unwrap(), rec);
}

#[test]
fn malformed_dataset_lists_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_dataset(&SynthConfig { count: 2, width: 24, height: 24, seed: 2 }).unwrap();
    for s in &samples {
        write_sample(dir.path(), &s.frame, &s.pair).unwrap();
    }
    std::fs::write(dir.path().join("raw/synth_000.pgm"), b"P6 garbage").unwrap();
    std::fs::remove_file(dir.path().join("target/synth_001.png")).unwrap();
    let msg = load_dataset(dir.path(), true).unwrap_err().to_string();
    assert!(msg.contains("synth_000.pgm") && msg.contains("synth_001.png"), "{msg}");
}
