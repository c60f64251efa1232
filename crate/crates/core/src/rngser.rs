//! Serde for ChaCha generator state without 128-bit integers, which
//! buffered (tagged) JSON cannot carry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct State {
    seed: String,
    stream: u64,
    word_pos: String,
}

pub fn serialize<S: Serializer>(rng: &ChaCha8Rng, s: S) -> Result<S::Ok, S::Error> {
    State {
        seed: hex::encode(rng.get_seed()),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
    .serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ChaCha8Rng, D::Error> {
    use serde::de::Error;
    let st = State::deserialize(d)?;
    let seed: [u8; 32] = hex::decode(&st.seed)
        .map_err(D::Error::custom)?
        .try_into()
        .map_err(|_| D::Error::custom("seed must be 32 bytes"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(st.stream);
    rng.set_word_pos(st.word_pos.parse().map_err(D::Error::custom)?);
    Ok(rng)
}
