use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zeromotion::codec::{decode_sequence, encode_sequence, CodecConfig};
use zeromotion::config::FileConfig;
use zeromotion::data::{load_sequence, read_png, save_png_dir, InputFormat, MovingTexture, Sequence};
use zeromotion::entropy::write_container;
use zeromotion::metrics::QualityMetric;
use zeromotion::model::{Model, ModelConfig};
use zeromotion::report::{parse_rd_csv, RD_CSV_HEADER};
use zeromotion::stats::layer_stats;
use zeromotion::Error;

fn sequence(w: usize, h: usize, n: usize, seed: u64) -> Sequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Sequence::from_frames(MovingTexture::random(w, h, &mut rng).frames(n)).unwrap()
}

#[test]
fn png_frames_round_trip_at_eight_bits() {
    let dir = tempfile::tempdir().unwrap();
    let seq = sequence(40, 24, 3, 1);
    let frames = seq.cropped();
    save_png_dir(dir.path(), &frames).unwrap();
    let back = load_sequence(dir.path(), InputFormat::PngDir).unwrap();
    assert_eq!((back.width, back.height, back.frames.len()), (40, 24, 3));
    for (a, b) in frames.iter().zip(back.cropped()) {
        assert_eq!(a.to_rgb8(), b.to_rgb8());
    }
    // Padding replicates the last row and column up to the 64 grid.
    assert_eq!(back.padded_width(), 64);
    let f = read_png(&dir.path().join("frame_00000.png"), 0).unwrap();
    assert_eq!((f.width(), f.height()), (40, 24));
}

#[test]
fn yuv420_grey_maps_to_grey() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grey.yuv");
    let (w, h) = (8, 4);
    // Luma 126 is mid grey in limited range; neutral chroma.
    let mut frame = vec![126u8; w * h];
    frame.extend(vec![128u8; w * h / 2]);
    let bytes: Vec<u8> = frame.iter().chain(&frame).copied().collect();
    std::fs::write(&path, &bytes).unwrap();
    let seq = load_sequence(&path, InputFormat::Yuv420 { width: w, height: h }).unwrap();
    assert_eq!(seq.frames.len(), 2);
    for v in seq.cropped()[1].data.data() {
        assert!((v - 110.0 / 219.0).abs() < 1e-6);
    }
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(
        load_sequence(&path, InputFormat::Yuv420 { width: w, height: h }),
        Err(Error::Truncated(_))
    ));
    assert!(matches!(load_sequence(&dir.path().join("none"), InputFormat::PngDir), Err(Error::Missing(_))));
}

#[test]
fn bundle_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tlzw");
    let mut m = Model::new(ModelConfig::toy(), 5);
    m.skip_active = true;
    m.meta.lambda = 256.0;
    m.meta.lineage.push("4".into());
    m.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.meta, m.meta);
    assert!(back.skip_active);
    for (a, b) in m.store.ids().zip(back.store.ids()) {
        assert_eq!(m.store.name(a), back.store.name(b));
        assert_eq!(m.store.get(a), back.store.get(b));
    }
    let keys: BTreeSet<&str> = m.store.ids().map(|id| m.store.name(id).split('.').next().unwrap()).collect();
    assert_eq!(keys, BTreeSet::from(["base", "enh", "fa", "interp", "intra"]));

    let bytes = std::fs::read(&path).unwrap();
    assert!(Model::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    assert!(Model::from_bytes(b"nope").is_err());
}

#[test]
fn layer_stats_account_for_every_payload_byte() {
    let seq = sequence(64, 64, 5, 2);
    let mut model = Model::new(ModelConfig::toy(), 3);
    model.skip_active = true;
    let cfg = CodecConfig {
        gop_size: 4,
        ..CodecConfig::default()
    };
    let enc = encode_sequence(&seq, &model, &cfg).unwrap();
    let dec = decode_sequence(&enc.bitstream, &model).unwrap();
    let stats = layer_stats(&enc.bitstream, &dec.masks).unwrap();
    let container = write_container(&enc.bitstream).unwrap();
    let framing: usize = enc.bitstream.records.iter().map(|r| 6 + 4 * r.payloads.len()).sum();
    assert_eq!(stats.total_bits(), (container.len() - 28 - framing) as u64 * 8);
    assert!(stats.base_bits > 0 && stats.enh_bits > 0 && stats.intra_bits > 0);
    assert_eq!(stats.reference.frames + stats.non_reference.frames, 3);
    for f in &stats.frames {
        let r = f.retained.unwrap_or(0.0);
        assert!((0.0..=1.0).contains(&r));
    }
    let csv = stats.to_csv();
    assert!(csv.starts_with("poc,frame_type,base_bits,enh_bits,intra_bits,retained\n"));
    assert_eq!(csv.lines().count(), 1 + 5 + 3);
    assert!(layer_stats(&enc.bitstream, &dec.masks[..4]).is_err());
}

#[test]
fn all_intra_stream_has_no_layer_bits() {
    let seq = sequence(64, 64, 3, 3);
    let model = Model::new(ModelConfig::toy(), 4);
    let cfg = CodecConfig {
        gop_size: 1,
        ..CodecConfig::default()
    };
    let enc = encode_sequence(&seq, &model, &cfg).unwrap();
    let stats = layer_stats(&enc.bitstream, &enc.recon.masks).unwrap();
    assert_eq!((stats.base_bits, stats.enh_bits), (0, 0));
    assert_eq!(stats.total_bits(), stats.intra_bits);
    assert_eq!(stats.mean_retained(), 0.0);
}

#[test]
fn config_file_sections_override_defaults() {
    let text = "[model]\npreset = \"toy\"\n[train]\nlambda = 256.0\ncrop = 64\n[codec]\ngop_size = 4\nmetric = \"msssim\"\n";
    let c = FileConfig::parse(text).unwrap();
    assert_eq!(c.train.lambda, 256.0);
    assert_eq!(c.train.crop, 64);
    assert_eq!(c.codec.gop_size, 4);
    assert_eq!(c.codec.metric, QualityMetric::Msssim);
    assert_eq!(c.model.model_config(), ModelConfig::toy());
    assert!(matches!(FileConfig::parse("[train]\nlamda = 1.0\n"), Err(Error::Config(_))));
}

fn cli(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_zeromotion"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn cli_encode_decode_stats_eval_and_profile() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let input = d.join("clip");
    save_png_dir(&input, &sequence(64, 48, 3, 6).cropped()).unwrap();
    let mut model = Model::new(ModelConfig::toy(), 7);
    model.skip_active = true;
    model.save(&d.join("m.tlzw")).unwrap();
    let (m, bits, out) = (d.join("m.tlzw"), d.join("c.bin"), d.join("dec"));

    let table = cli(&["--seed", "1", "encode", "--model", path(&m), "--input", path(&input), "--output", path(&bits), "--gop", "2"]);
    assert!(table.contains("PSNR"));
    cli(&["decode", "--model", path(&m), "--input", path(&bits), "--output", path(&out)]);
    let decoded = load_sequence(&out, InputFormat::PngDir).unwrap();
    assert_eq!((decoded.width, decoded.height, decoded.frames.len()), (64, 48, 3));

    let stats = cli(&["stats", "--model", path(&m), "--input", path(&bits)]);
    assert!(stats.lines().any(|l| l.starts_with(",ALL,")));

    let rd = d.join("rd.csv");
    cli(&["eval", "--model", path(&m), "--input", path(&input), "--csv", path(&rd), "--gop", "2"]);
    let text = std::fs::read_to_string(&rd).unwrap();
    assert_eq!(text.lines().next().unwrap(), RD_CSV_HEADER);
    assert_eq!(parse_rd_csv(&text).unwrap().len(), 1);

    let curve = d.join("curve.csv");
    std::fs::write(
        &curve,
        format!("{RD_CSV_HEADER}\nclip,256,0.05,30.0,\nclip,512,0.09,32.1,\nclip,1024,0.16,34.0,\nclip,2048,0.3,35.8,\n"),
    )
    .unwrap();
    let report = cli(&["eval", "--test", path(&curve), "--anchor", path(&curve)]);
    assert!(report.contains("BD-rate vs anchor: +0.00%"), "{report}");

    let profile = cli(&["profile", "--height", "128", "--width", "128"]);
    for row in ["Frame Interpolator", "Base Layer", "Enhancement Layer"] {
        assert!(profile.contains(row));
    }

    let bad = Command::new(env!("CARGO_BIN_EXE_zeromotion"))
        .args(["encode", "--model", path(&m), "--input", path(&input), "--output", path(&bits), "--gop", "6"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
