use crowbar_core::crypto::{
    cbc_decrypt, cbc_encrypt, encrypt_mb1, CryptoEngine, CryptoError, Key, SLOT_FEK1, SLOT_FEK2, SLOT_MB1, SLOT_ODM,
};
use crowbar_core::device::{DeviceBundle, DeviceSpec, SLOT_SE};
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Vector {
    key: String,
    iv: String,
    plaintext: String,
    ciphertext: String,
}

fn arr<const N: usize>(s: &str) -> [u8; N] {
    hex::decode(s).unwrap().try_into().unwrap()
}

#[test]
fn cbc_matches_reference_vectors() {
    let text = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/aes_cbc_vectors.json")).unwrap();
    let vectors: Vec<Vector> = serde_json::from_slice(&text).unwrap();
    assert!(vectors.len() >= 100);
    for v in vectors {
        let (key, iv): (Key, [u8; 16]) = (arr(&v.key), arr(&v.iv));
        let pt = hex::decode(&v.plaintext).unwrap();
        let ct = hex::decode(&v.ciphertext).unwrap();
        assert_eq!(cbc_encrypt(&key, &iv, &pt).unwrap(), ct);
        assert_eq!(cbc_decrypt(&key, &iv, &ct).unwrap(), pt);
    }
}

#[test]
fn unaligned_input_rejected() {
    assert_eq!(cbc_encrypt(&[0; 16], &[0; 16], &[0; 15]), Err(CryptoError::NotBlockAligned(15)));
    assert_eq!(cbc_decrypt(&[0; 16], &[0; 16], &[0; 17]), Err(CryptoError::NotBlockAligned(17)));
}

fn engine(bundle: &DeviceBundle) -> CryptoEngine {
    let mut e = CryptoEngine::new();
    e.load_feks(&bundle.personality.feks).unwrap();
    e.decrypt_key_blob(bundle.image.key_blob()).unwrap();
    e
}

#[test]
fn mb1_slot_cleared_after_decrypt_others_persist() {
    for odm in [false, true] {
        let b = DeviceBundle::generate(&DeviceSpec {
            odm_secure_boot: odm,
            ..Default::default()
        })
        .unwrap();
        let mut e = engine(&b);
        assert_eq!(e.slot(SLOT_MB1).unwrap().key, Some(b.secrets.mb1_key));
        let r = e.decrypt_mb1(b.mb1_enc(), odm).unwrap();
        assert_eq!(r.plaintext, b.mb1_plain);
        assert_eq!(e.slot(SLOT_MB1).unwrap().key, None);
        assert_eq!(e.slot(SLOT_SE).unwrap().key, Some(b.secrets.se_key));
        assert!(e.slot(SLOT_FEK1).unwrap().key.is_some());
        assert!(e.slot(SLOT_FEK2).unwrap().key.is_some());
        assert_eq!(e.slot(SLOT_ODM).unwrap().key.is_some(), odm);
        assert_eq!(e.decrypt_mb1(b.mb1_enc(), odm), Err(CryptoError::EmptySlot(SLOT_MB1)));
    }
}

#[test]
fn feks_load_once() {
    let b = DeviceBundle::generate(&DeviceSpec::default()).unwrap();
    let mut e = engine(&b);
    assert_eq!(e.load_feks(&b.personality.feks), Err(CryptoError::FeksAlreadyLoaded));
}

#[test]
fn blob_needs_fek1() {
    let b = DeviceBundle::generate(&DeviceSpec::default()).unwrap();
    assert_eq!(
        CryptoEngine::new().decrypt_key_blob(b.image.key_blob()),
        Err(CryptoError::Fek1Missing)
    );
}

#[test]
fn odm_layer_requires_odm_key() {
    let b = DeviceBundle::generate(&DeviceSpec {
        odm_secure_boot: true,
        ..Default::default()
    })
    .unwrap();
    let mut e = engine(&b);
    assert_eq!(e.decrypt_mb1(b.mb1_enc(), false), Err(CryptoError::AuthFailed));
    assert_eq!(e.slot(SLOT_MB1).unwrap().key, Some(b.secrets.mb1_key));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn round_trip(key in any::<Key>(), iv in any::<[u8; 16]>(), blocks in proptest::collection::vec(any::<[u8; 16]>(), 1..16)) {
        let pt = blocks.concat();
        let ct = cbc_encrypt(&key, &iv, &pt).unwrap();
        prop_assert_eq!(cbc_decrypt(&key, &iv, &ct).unwrap(), pt);
    }

    #[test]
    fn wrong_iv_breaks_first_block_only(key in any::<Key>(), iv in any::<[u8; 16]>(), flip in 1u8..=255, blocks in proptest::collection::vec(any::<[u8; 16]>(), 2..8)) {
        let pt = blocks.concat();
        let ct = cbc_encrypt(&key, &[0; 16], &pt).unwrap();
        let mut bad_iv = iv;
        if bad_iv == [0; 16] {
            bad_iv[0] = flip;
        }
        let got = cbc_decrypt(&key, &bad_iv, &ct).unwrap();
        prop_assert_ne!(&got[..16], &pt[..16]);
        prop_assert_eq!(&got[16..], &pt[16..]);
    }

    #[test]
    fn tampered_mb1_fails_auth(mb1 in any::<Key>(), pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let mut image = encrypt_mb1(&mb1, None, b"MB1\0payload");
        let i = pos.index(image.len());
        image[i] ^= flip;
        let mut e = CryptoEngine::new();
        e.set_slot(SLOT_MB1, mb1, "MB1_KEY").unwrap();
        prop_assert_eq!(e.decrypt_mb1(&image, false), Err(CryptoError::AuthFailed));
    }
}
