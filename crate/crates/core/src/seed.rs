use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers mixed into derived seeds so that independent random
/// consumers never share a stream.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Pose = 1,
    DepthScale = 2,
    Photometric = 3,
    Mining = 4,
    Init = 5,
    Ransac = 6,
    Scene = 7,
    Projection = 8,
    Benchmark = 9,
    Pair = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(stream as u64)) ^ index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
