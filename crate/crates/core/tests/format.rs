mod common;

use bknet_core::arch;
use bknet_core::decompose::{decompose_network, DecomposePlan};
use bknet_core::graph::format::{from_bytes, load_model, save_model, to_bytes};
use bknet_core::graph::forward;
use bknet_core::prune::{prune, PruneConfig};
use bknet_core::{Error, Network};
use common::{randn, rng};

/// Resnet with centered decomposition and pruning masks, so every payload
/// kind (dense, decomposed, mask bits, skip projections) is present.
fn rich_net() -> Network {
    let base = arch::resnet18_cifar(10, 7);
    let plan = DecomposePlan {
        center: true,
        ..DecomposePlan::default()
    };
    let (mut net, _) = decompose_network(&base, &plan).unwrap();
    prune(&mut net, &PruneConfig::default()).unwrap();
    net
}

#[test]
fn round_trip_is_exact() {
    let net = rich_net();
    let bytes = to_bytes(&net).unwrap();
    let back = from_bytes(&bytes).unwrap();
    assert_eq!(back, net);
    assert_eq!(to_bytes(&back).unwrap(), bytes);
    let x = randn(&mut rng(1), &[2, 3, 32, 32]);
    let a = forward(&net, &x).unwrap();
    let b = forward(&back, &x).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn round_trip_through_file() {
    for net in [arch::toy_cnn(10, 3), arch::vgg16_cifar(10, 3)] {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bknet");
        save_model(&net, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), net);
    }
}

#[test]
fn file_starts_with_magic() {
    let bytes = to_bytes(&arch::toy_cnn(10, 0)).unwrap();
    assert_eq!(&bytes[..8], b"BKNETv01");
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = to_bytes(&arch::toy_cnn(4, 0)).unwrap();
    let step = (bytes.len() / 200).max(1);
    for len in (0..bytes.len()).step_by(step).chain([bytes.len() - 1]) {
        assert!(from_bytes(&bytes[..len]).is_err(), "length {len}");
    }
}

#[test]
fn any_flipped_byte_fails_checksum() {
    let bytes = to_bytes(&rich_net()).unwrap();
    let step = bytes.len() / 97;
    for pos in (8..bytes.len() - 4).step_by(step) {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        match from_bytes(&bad) {
            Err(Error::Checksum { .. }) => {}
            other => panic!("byte {pos}: {other:?}"),
        }
    }
    let mut bad = bytes.clone();
    let n = bad.len();
    bad[n - 1] ^= 1;
    assert!(matches!(from_bytes(&bad), Err(Error::Checksum { .. })));
}

#[test]
fn version_is_checked_before_checksum() {
    let mut bytes = to_bytes(&arch::toy_cnn(10, 0)).unwrap();
    bytes[7] = b'2';
    match from_bytes(&bytes) {
        Err(Error::VersionMismatch { found, expected }) => {
            assert_eq!(found, "02");
            assert_eq!(expected, "01");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn bad_magic_is_a_format_error() {
    let mut bytes = to_bytes(&arch::toy_cnn(10, 0)).unwrap();
    bytes[0] = b'X';
    assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    assert!(matches!(from_bytes(b""), Err(Error::Format(_))));
}

#[test]
fn trailing_garbage_with_valid_crc_is_rejected() {
    let bytes = to_bytes(&arch::toy_cnn(10, 0)).unwrap();
    let mut body = bytes[..bytes.len() - 4].to_vec();
    body.extend_from_slice(&[0, 0, 0, 0]);
    let crc = crc32(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(from_bytes(&body), Err(Error::Format(_))));
}

/// Bitwise CRC-32 (IEEE, reflected), independent of the crate's hasher.
fn crc32(data: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

#[test]
fn stored_crc_matches_reference_crc32() {
    assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    let bytes = to_bytes(&rich_net()).unwrap();
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    assert_eq!(u32::from_le_bytes(tail.try_into().unwrap()), crc32(body));
}
