mod common;

use proptest::prelude::*;
use sida::checkpoint::{read_model, read_predictor, write_model, write_predictor, MODEL_MAGIC, PREDICTOR_MAGIC};
use sida::Error;
use sida_core::numkit::ParamSet;

fn model_bytes(seed: u64) -> Vec<u8> {
    let mut buf = Vec::new();
    write_model(&mut buf, &common::tiny_model(4, seed)).unwrap();
    buf
}

#[test]
fn files_start_with_their_magic() {
    assert_eq!(&model_bytes(1)[..8], &MODEL_MAGIC);
    let model = common::tiny_model(4, 1);
    let mut buf = Vec::new();
    write_predictor(&mut buf, &common::tiny_predictor(&model, 2)).unwrap();
    assert_eq!(&buf[..8], &PREDICTOR_MAGIC);
}

#[test]
fn predictor_round_trip_is_exact() {
    let model = common::tiny_model(5, 3);
    let net = common::tiny_predictor(&model, 4);
    let mut buf = Vec::new();
    write_predictor(&mut buf, &net).unwrap();
    let back = read_predictor(&mut buf.as_slice()).unwrap();
    assert_eq!(back.config(), net.config());
    assert_eq!(back.flatten(), net.flatten());
}

#[test]
fn magics_are_not_interchangeable() {
    let buf = model_bytes(5);
    assert!(matches!(read_predictor(&mut buf.as_slice()), Err(Error::Checkpoint(_))));
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_model(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
}

#[test]
fn every_truncation_is_rejected() {
    let buf = model_bytes(6);
    for cut in (0..buf.len()).step_by(97).chain([buf.len() - 1]) {
        assert!(read_model(&mut &buf[..cut]).is_err(), "accepted {cut} of {} bytes", buf.len());
    }
}

#[test]
fn trailing_bytes_and_bad_values_are_rejected() {
    let mut buf = model_bytes(7);
    buf.push(0);
    assert!(read_model(&mut buf.as_slice()).is_err());
    let mut buf = model_bytes(7);
    let n = buf.len();
    buf[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(read_model(&mut buf.as_slice()).is_err());
    let mut buf = model_bytes(7);
    buf[8] = 9;
    assert!(read_model(&mut buf.as_slice()).is_err());
}

#[test]
fn save_and_load_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = common::tiny_model(3, 8);
    let path = dir.path().join("m.ckpt");
    sida::checkpoint::save_model(&path, &model).unwrap();
    let back = sida::checkpoint::load_model(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.flatten(), model.flatten());
    assert!(sida::checkpoint::load_model(&dir.path().join("missing")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn model_round_trip_is_bitwise(seed in any::<u64>(), experts in 1usize..6) {
        let model = common::tiny_model(experts, seed);
        let mut buf = Vec::new();
        write_model(&mut buf, &model).unwrap();
        let back = read_model(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.config(), model.config());
        let (a, b) = (back.flatten(), model.flatten());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let mut again = Vec::new();
        write_model(&mut again, &back).unwrap();
        prop_assert_eq!(again, buf);
    }
}
