//! Hardware crypto engine model: key slots, FEK loading and readout
//! protection, key-blob decryption and layered MB1 decryption.
//!
//! Key-blob layout (plaintext, before encryption): a sequence of 32-byte
//! entries, each a 16-byte label header followed by a 16-byte key:
//!
//! ```text
//! header: "KSLT" | slot u8 | 0x01 | label (10 bytes, NUL padded)
//! key:    16 bytes
//! ```
//!
//! Parsing stops at the first header without the magic. The whole blob is
//! encrypted as one AES-128-CBC stream under FEK1 with an all-zero IV.
//!
//! MB1 layer format (one per encryption layer):
//!
//! ```text
//! length u32 LE | 12 zero bytes | AES-128-CBC(zero IV) ciphertext | HMAC-SHA256 tag
//! ```
//!
//! The tag covers the length block and the ciphertext.

use aes::cipher::{generic_array::GenericArray, BlockDecrypt, BlockEncrypt, KeyInit};
use aes::Aes128;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

pub const BLOCK: usize = 16;
pub const SLOT_COUNT: usize = 16;
pub const KEY_BLOB_BYTES: usize = 4096;
pub const TAG_BYTES: usize = 32;

pub const SLOT_FEK1: u8 = 0;
pub const SLOT_FEK2: u8 = 1;
pub const SLOT_MB1: u8 = 2;
pub const SLOT_ODM: u8 = 3;
/// Reserved for factory key provisioning; never populated here.
pub const SLOT_FSKP: u8 = 15;

const BLOB_MAGIC: &[u8; 4] = b"KSLT";
const ODM_DERIVE_CONST: [u8; 16] = *b"ODM-SECURE-BOOT\0";

pub type Key = [u8; 16];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("FEKs were already loaded")]
    FeksAlreadyLoaded,
    #[error("FEK1 is not loaded")]
    Fek1Missing,
    #[error("data length {0} is not a multiple of 16")]
    NotBlockAligned(usize),
    #[error("key slot {0} is empty")]
    EmptySlot(u8),
    #[error("key slot index {0} out of range")]
    BadSlot(u8),
    #[error("image authentication failed")]
    AuthFailed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fek2Select {
    Nvkey,
    Testkey,
}

/// Fuse-sourced FEK material of one device.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FekSource {
    pub nvkey: Key,
    pub testkey: Key,
    pub fek2_select: Fek2Select,
}

impl FekSource {
    pub fn fek1(&self) -> Key {
        self.nvkey
    }

    pub fn fek2(&self) -> Key {
        match self.fek2_select {
            Fek2Select::Nvkey => self.nvkey,
            Fek2Select::Testkey => self.testkey,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeySlot {
    pub key: Option<Key>,
    pub readable: bool,
    pub label: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CryptoEngine {
    slots: [KeySlot; SLOT_COUNT],
    feks_loaded: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyBlobReport {
    pub plaintext: Vec<u8>,
    pub populated: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mb1Result {
    pub plaintext: Vec<u8>,
    pub signature_ok: bool,
}

impl CryptoEngine {
    pub fn new() -> Self {
        let mut e = CryptoEngine::default();
        e.slots[SLOT_FSKP as usize].label = "ODM_RESERVED".into();
        e
    }

    pub fn slot(&self, index: u8) -> Option<&KeySlot> {
        self.slots.get(index as usize)
    }

    pub fn feks_loaded(&self) -> bool {
        self.feks_loaded
    }

    pub fn set_slot(&mut self, index: u8, key: Key, label: &str) -> Result<(), CryptoError> {
        let slot = self.slots.get_mut(index as usize).ok_or(CryptoError::BadSlot(index))?;
        *slot = KeySlot {
            key: Some(key),
            readable: false,
            label: label.to_string(),
        };
        Ok(())
    }

    pub fn clear_slot(&mut self, index: u8) {
        if let Some(s) = self.slots.get_mut(index as usize) {
            s.key = None;
        }
    }

    fn key(&self, index: u8) -> Result<Key, CryptoError> {
        self.slot(index)
            .ok_or(CryptoError::BadSlot(index))?
            .key
            .ok_or(CryptoError::EmptySlot(index))
    }

    /// Loads both FEKs into their temporary slots. The caller is
    /// responsible for raising the readout-protect fuse bit afterwards.
    pub fn load_feks(&mut self, source: &FekSource) -> Result<(), CryptoError> {
        if self.feks_loaded {
            return Err(CryptoError::FeksAlreadyLoaded);
        }
        self.set_slot(SLOT_FEK1, source.fek1(), "FEK1")?;
        self.set_slot(SLOT_FEK2, source.fek2(), "FEK2")?;
        self.feks_loaded = true;
        Ok(())
    }

    pub fn decrypt_key_blob(&mut self, blob: &[u8]) -> Result<KeyBlobReport, CryptoError> {
        let fek1 = self.key(SLOT_FEK1).map_err(|_| CryptoError::Fek1Missing)?;
        let plaintext = cbc_decrypt(&fek1, &[0; BLOCK], blob)?;
        let entries = parse_key_blob(&plaintext);
        let mut populated = Vec::new();
        for (slot, label, key) in entries {
            if slot == SLOT_FEK1 || slot == SLOT_FEK2 || slot as usize >= SLOT_COUNT {
                continue;
            }
            self.set_slot(slot, key, &label)?;
            populated.push(slot);
        }
        Ok(KeyBlobReport { plaintext, populated })
    }

    /// Derives the ODM key from FEK2 into its slot.
    pub fn derive_odm_key(&mut self) -> Result<Key, CryptoError> {
        let fek2 = self.key(SLOT_FEK2)?;
        let k = derive_odm_key(&fek2);
        self.set_slot(SLOT_ODM, k, "ODM_KEY")?;
        Ok(k)
    }

    /// Removes the ODM layer (when enabled) then the vendor layer, and
    /// clears the MB1 key slot on success.
    pub fn decrypt_mb1(&mut self, image: &[u8], odm_enabled: bool) -> Result<Mb1Result, CryptoError> {
        let mb1_key = self.key(SLOT_MB1)?;
        let inner = if odm_enabled {
            let odm = match self.key(SLOT_ODM) {
                Ok(k) => k,
                Err(_) => self.derive_odm_key()?,
            };
            open_layer(&odm, image)?
        } else {
            image.to_vec()
        };
        let plaintext = open_layer(&mb1_key, &inner)?;
        self.clear_slot(SLOT_MB1);
        Ok(Mb1Result {
            plaintext,
            signature_ok: true,
        })
    }
}

fn parse_key_blob(plaintext: &[u8]) -> Vec<(u8, String, Key)> {
    let mut out = Vec::new();
    for entry in plaintext.chunks_exact(2 * BLOCK) {
        let header = &entry[..BLOCK];
        if &header[..4] != BLOB_MAGIC || header[5] != 1 {
            break;
        }
        let label_bytes = &header[6..BLOCK];
        let end = label_bytes.iter().position(|&b| b == 0).unwrap_or(label_bytes.len());
        let label = String::from_utf8_lossy(&label_bytes[..end]).into_owned();
        let mut key = [0u8; 16];
        key.copy_from_slice(&entry[BLOCK..]);
        out.push((header[4], label, key));
    }
    out
}

/// Builds the plaintext of a key blob (before encryption), zero-padded to
/// `KEY_BLOB_BYTES`.
pub fn build_key_blob_plaintext(entries: &[(u8, &str, Key)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(KEY_BLOB_BYTES);
    for (slot, label, key) in entries {
        let mut header = [0u8; BLOCK];
        header[..4].copy_from_slice(BLOB_MAGIC);
        header[4] = *slot;
        header[5] = 1;
        let l = label.as_bytes();
        let n = l.len().min(10);
        header[6..6 + n].copy_from_slice(&l[..n]);
        out.extend_from_slice(&header);
        out.extend_from_slice(key);
    }
    out.resize(KEY_BLOB_BYTES.max(out.len()), 0);
    out
}

pub fn encrypt_key_blob(fek1: &Key, entries: &[(u8, &str, Key)]) -> Vec<u8> {
    let pt = build_key_blob_plaintext(entries);
    cbc_encrypt(fek1, &[0; BLOCK], &pt).expect("blob is block aligned")
}

pub fn derive_odm_key(fek2: &Key) -> Key {
    let cipher = Aes128::new(GenericArray::from_slice(fek2));
    let mut block = GenericArray::clone_from_slice(&ODM_DERIVE_CONST);
    cipher.encrypt_block(&mut block);
    block.into()
}

pub fn cbc_encrypt(key: &Key, iv: &[u8; BLOCK], data: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if !data.len().is_multiple_of(BLOCK) {
        return Err(CryptoError::NotBlockAligned(data.len()));
    }
    let cipher = Aes128::new(GenericArray::from_slice(key));
    let mut prev = *iv;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks_exact(BLOCK) {
        let mut block = [0u8; BLOCK];
        for i in 0..BLOCK {
            block[i] = chunk[i] ^ prev[i];
        }
        let mut b = GenericArray::from(block);
        cipher.encrypt_block(&mut b);
        prev = b.into();
        out.extend_from_slice(&prev);
    }
    Ok(out)
}

pub fn cbc_decrypt(key: &Key, iv: &[u8; BLOCK], data: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if !data.len().is_multiple_of(BLOCK) {
        return Err(CryptoError::NotBlockAligned(data.len()));
    }
    let cipher = Aes128::new(GenericArray::from_slice(key));
    let mut prev = *iv;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks_exact(BLOCK) {
        let mut b = GenericArray::clone_from_slice(chunk);
        cipher.decrypt_block(&mut b);
        for i in 0..BLOCK {
            out.push(b[i] ^ prev[i]);
        }
        prev.copy_from_slice(chunk);
    }
    Ok(out)
}

fn tag(key: &Key, data: &[u8]) -> [u8; TAG_BYTES] {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

/// Wraps `plaintext` in one authenticated encryption layer.
pub fn seal_layer(key: &Key, plaintext: &[u8]) -> Vec<u8> {
    let mut header = [0u8; BLOCK];
    header[..4].copy_from_slice(&(plaintext.len() as u32).to_le_bytes());
    let mut padded = plaintext.to_vec();
    padded.resize(plaintext.len().div_ceil(BLOCK) * BLOCK, 0);
    let ct = cbc_encrypt(key, &[0; BLOCK], &padded).expect("padded");
    let mut out = header.to_vec();
    out.extend_from_slice(&ct);
    let t = tag(key, &out);
    out.extend_from_slice(&t);
    out
}

pub fn open_layer(key: &Key, image: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if image.len() < BLOCK + TAG_BYTES || !(image.len() - TAG_BYTES).is_multiple_of(BLOCK) {
        return Err(CryptoError::AuthFailed);
    }
    let (body, got) = image.split_at(image.len() - TAG_BYTES);
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(body);
    mac.verify_slice(got).map_err(|_| CryptoError::AuthFailed)?;
    let len = u32::from_le_bytes([body[0], body[1], body[2], body[3]]) as usize;
    let pt = cbc_decrypt(key, &[0; BLOCK], &body[BLOCK..])?;
    if len > pt.len() {
        return Err(CryptoError::AuthFailed);
    }
    Ok(pt[..len].to_vec())
}

/// Produces an MB1 image: vendor layer, then (optionally) the ODM layer on top.
pub fn encrypt_mb1(mb1_key: &Key, odm_key: Option<&Key>, plaintext: &[u8]) -> Vec<u8> {
    let inner = seal_layer(mb1_key, plaintext);
    match odm_key {
        Some(k) => seal_layer(k, &inner),
        None => inner,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(b: u8) -> Key {
        [b; 16]
    }

    fn source() -> FekSource {
        FekSource {
            nvkey: k(0x11),
            testkey: k(0x22),
            fek2_select: Fek2Select::Nvkey,
        }
    }

    #[test]
    fn fips197_known_answer() {
        // FIPS-197 appendix C.1
        let key: Key = hex::decode("000102030405060708090a0b0c0d0e0f").unwrap().try_into().unwrap();
        let pt = hex::decode("00112233445566778899aabbccddeeff").unwrap();
        let ct = cbc_encrypt(&key, &[0; 16], &pt).unwrap();
        assert_eq!(hex::encode(ct), "69c4e0d86a7b0430d8cdb78070b4c55a");
    }

    #[test]
    fn fek2_selector() {
        let mut e = CryptoEngine::new();
        let mut s = source();
        s.fek2_select = Fek2Select::Testkey;
        e.load_feks(&s).unwrap();
        assert_eq!(e.slot(SLOT_FEK2).unwrap().key, Some(k(0x22)));
        assert_eq!(e.slot(SLOT_FEK1).unwrap().key, Some(k(0x11)));
    }

    #[test]
    fn double_load_rejected() {
        let mut e = CryptoEngine::new();
        e.load_feks(&source()).unwrap();
        assert_eq!(e.load_feks(&source()), Err(CryptoError::FeksAlreadyLoaded));
    }

    #[test]
    fn blob_round_trip() {
        let entries = [(SLOT_MB1, "MB1_KEY", k(0xA5)), (4, "BOOT_KEY", k(0x5A))];
        let blob = encrypt_key_blob(&k(0x11), &entries);
        assert_eq!(blob.len(), KEY_BLOB_BYTES);
        let mut e = CryptoEngine::new();
        e.load_feks(&source()).unwrap();
        let r = e.decrypt_key_blob(&blob).unwrap();
        assert_eq!(r.populated, vec![SLOT_MB1, 4]);
        assert_eq!(e.slot(SLOT_MB1).unwrap().key, Some(k(0xA5)));
        assert_eq!(e.slot(4).unwrap().label, "BOOT_KEY");
    }

    #[test]
    fn blob_errors() {
        let mut e = CryptoEngine::new();
        assert_eq!(e.decrypt_key_blob(&[0; 32]), Err(CryptoError::Fek1Missing));
        e.load_feks(&source()).unwrap();
        assert_eq!(e.decrypt_key_blob(&[0; 17]), Err(CryptoError::NotBlockAligned(17)));
        let r = e.decrypt_key_blob(&[]).unwrap();
        assert!(r.populated.is_empty());
    }

    #[test]
    fn zero_blob_decrypts_to_repeated_block() {
        let mut e = CryptoEngine::new();
        e.load_feks(&source()).unwrap();
        let r = e.decrypt_key_blob(&[0; 64]).unwrap();
        // every ciphertext block is zero, so each plaintext block is D_K(0)
        let first = &r.plaintext[..16];
        for c in r.plaintext.chunks(16) {
            assert_eq!(c, first);
        }
        assert!(r.populated.is_empty());
    }

    #[test]
    fn mb1_layers() {
        let pt: Vec<u8> = (0..100u8).collect();
        let mb1_key = k(0x33);
        let mut e = CryptoEngine::new();
        e.load_feks(&source()).unwrap();
        e.set_slot(SLOT_MB1, mb1_key, "MB1_KEY").unwrap();
        e.set_slot(5, k(0x44), "OTHER").unwrap();
        let img = encrypt_mb1(&mb1_key, None, &pt);
        let r = e.decrypt_mb1(&img, false).unwrap();
        assert_eq!(r.plaintext, pt);
        assert!(e.slot(SLOT_MB1).unwrap().key.is_none());
        assert_eq!(e.slot(5).unwrap().key, Some(k(0x44)));
        assert_eq!(e.slot(SLOT_FEK1).unwrap().key, Some(k(0x11)));

        let odm = derive_odm_key(&source().fek2());
        let img = encrypt_mb1(&mb1_key, Some(&odm), &pt);
        e.set_slot(SLOT_MB1, mb1_key, "MB1_KEY").unwrap();
        assert_eq!(e.decrypt_mb1(&img, true).unwrap().plaintext, pt);
        // vendor-only decryption of a double-wrapped image fails
        e.set_slot(SLOT_MB1, mb1_key, "MB1_KEY").unwrap();
        assert_eq!(e.decrypt_mb1(&img, false), Err(CryptoError::AuthFailed));
    }

    #[test]
    fn truncated_mb1_fails_auth() {
        let mb1_key = k(0x33);
        let img = encrypt_mb1(&mb1_key, None, b"hello mb1");
        let mut e = CryptoEngine::new();
        e.set_slot(SLOT_MB1, mb1_key, "MB1_KEY").unwrap();
        assert_eq!(e.decrypt_mb1(&img[..img.len() - 1], false), Err(CryptoError::AuthFailed));
        assert_eq!(e.decrypt_mb1(&img[..10], false), Err(CryptoError::AuthFailed));
        // a failed attempt leaves the slot in place
        assert!(e.slot(SLOT_MB1).unwrap().key.is_some());
    }
}
