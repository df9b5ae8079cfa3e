use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zeromotion::codec::{decode_sequence, encode_sequence, CodecConfig};
use zeromotion::data::{MovingTexture, Sequence};
use zeromotion::entropy::{read_container, write_container};
use zeromotion::model::{Model, ModelConfig};
use zeromotion::Error;

fn sequence(w: usize, h: usize, n: usize, seed: u64) -> Sequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Sequence::from_frames(MovingTexture::random(w, h, &mut rng).frames(n)).unwrap()
}

fn model(skip: bool) -> Model {
    let mut m = Model::new(ModelConfig::toy(), 11);
    m.skip_active = skip;
    m
}

#[test]
fn decoder_matches_encoder_reference_buffer() {
    let seq = sequence(96, 80, 5, 3);
    let m = model(true);
    let cfg = CodecConfig { gop_size: 4, ..CodecConfig::default() };
    let enc = encode_sequence(&seq, &m, &cfg).unwrap();
    let bytes = write_container(&enc.bitstream).unwrap();
    let dec = decode_sequence(&read_container(&bytes).unwrap(), &m).unwrap();
    assert_eq!(dec.frames.len(), 5);
    for (a, b) in enc.recon.frames.iter().zip(&dec.frames) {
        assert_eq!(a.poc, b.poc);
        assert_eq!(a.data, b.data, "poc {}", a.poc);
    }
    for poc in [1, 2, 3] {
        assert!(dec.masks[poc].is_some());
        assert_eq!(enc.recon.masks[poc], dec.masks[poc]);
    }
    assert!(dec.masks[0].is_none() && dec.masks[4].is_none());
}

#[test]
fn single_frame_is_one_intra_payload() {
    let seq = sequence(64, 64, 1, 4);
    let enc = encode_sequence(&seq, &model(false), &CodecConfig::default()).unwrap();
    assert_eq!(enc.bitstream.records.len(), 1);
    assert_eq!(enc.bitstream.records[0].payloads.len(), 1);
}

#[test]
fn gop2_has_one_base_and_one_enhancement_payload() {
    let seq = sequence(64, 64, 3, 5);
    let cfg = CodecConfig { gop_size: 2, ..CodecConfig::default() };
    let enc = encode_sequence(&seq, &model(false), &cfg).unwrap();
    let pocs: Vec<u32> = enc.bitstream.records.iter().map(|r| r.poc).collect();
    assert_eq!(pocs, vec![0, 2, 1]);
    assert_eq!(enc.bitstream.records[2].payloads.len(), 2);
    let dec = decode_sequence(&enc.bitstream, &model(false)).unwrap();
    let order: Vec<usize> = dec.frames.iter().map(|f| f.poc).collect();
    assert_eq!(order, vec![0, 1, 2]);
}

#[test]
fn reordered_records_are_rejected() {
    let seq = sequence(64, 64, 3, 6);
    let cfg = CodecConfig { gop_size: 2, ..CodecConfig::default() };
    let mut bs = encode_sequence(&seq, &model(false), &cfg).unwrap().bitstream;
    bs.records.swap(1, 2);
    assert!(matches!(decode_sequence(&bs, &model(false)), Err(Error::Corrupt(_))));
}

#[test]
fn damaged_payload_fails_or_differs() {
    let seq = sequence(64, 64, 3, 7);
    let m = model(true);
    let cfg = CodecConfig { gop_size: 2, ..CodecConfig::default() };
    let enc = encode_sequence(&seq, &m, &cfg).unwrap();
    let mut bs = enc.bitstream.clone();
    let p = &mut bs.records[2].payloads[1];
    p.truncate(p.len() / 2);
    match decode_sequence(&bs, &m) {
        Err(_) => {}
        Ok(d) => assert_ne!(d.frames[1].data, enc.recon.frames[1].data),
    }
}
