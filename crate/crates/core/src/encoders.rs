//! Image and ingredient feature providers.
//!
//! Image features come from one of three providers: a seeded embedding of
//! the synthetic image key (dish + per-phase sentence counts + per-key
//! noise), a small randomly initialised convnet over an image rendered
//! from the key, or a precomputed feature file.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "SGNFEAT\0"
//! version  u32      1
//! count    u32
//! width    u32
//! count x { key: u32 length + UTF-8 bytes }
//! count x width f32, row-major, in key order
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{StructureKey, PHASES};
use crate::error::{Result, SgnError};
use crate::nn::layers::{Embedding, Linear};
use crate::nn::{ParamId, ParamStore, Tape, Tensor, Var};

pub const FEATURE_MAGIC: &[u8; 8] = b"SGNFEAT\0";
pub const FEATURE_VERSION: u32 = 1;

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn gaussian(seed: u64, width: usize, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..width).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    SyntheticEmbedding,
    TinyConvnet,
    PrecomputedFile,
}

/// Sum of a dish vector, one vector per (phase, count) pair and per-key
/// noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticProvider {
    pub width: usize,
    pub seed: u64,
    pub dish_scale: f64,
    pub count_scale: f64,
    pub noise: f64,
}

impl SyntheticProvider {
    pub fn new(width: usize, seed: u64) -> Self {
        Self { width, seed, dish_scale: 0.3, count_scale: 0.2, noise: 0.1 }
    }

    pub fn features(&self, key: &str) -> Result<Vec<f64>> {
        let k: StructureKey = key.parse()?;
        let s = self.seed.to_le_bytes();
        let mut v = gaussian(stable_hash(&[&s, b"dish", &k.dish.to_le_bytes()]), self.width, self.dish_scale);
        for (p, &c) in k.counts.iter().enumerate() {
            let part = gaussian(stable_hash(&[&s, b"count", &p.to_le_bytes(), &c.to_le_bytes()]), self.width, self.count_scale);
            v.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        let noise = gaussian(stable_hash(&[&s, b"noise", key.as_bytes()]), self.width, self.noise);
        v.iter_mut().zip(noise).for_each(|(a, b)| *a += b);
        Ok(v)
    }
}

/// Side length of rendered synthetic images.
pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;

/// Renders a `3 x (32*32)` image for a synthetic key: a dish-specific
/// colour wave plus one horizontal band per phase whose brightness grows
/// with that phase's sentence count, plus per-key noise.
pub fn render_image(key: &str, seed: u64) -> Result<Tensor> {
    let k: StructureKey = key.parse()?;
    let mut dish_rng = ChaCha8Rng::seed_from_u64(stable_hash(&[&seed.to_le_bytes(), b"render", &k.dish.to_le_bytes()]));
    let waves: Vec<(f64, f64, f64)> =
        (0..IMAGE_CHANNELS).map(|_| (dish_rng.gen_range(0.1..0.6), dish_rng.gen_range(0.1..0.6), dish_rng.gen_range(0.0..6.3))).collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(stable_hash(&[&seed.to_le_bytes(), b"pixels", key.as_bytes()]));
    let band = IMAGE_SIDE / PHASES.len();
    let mut img = Tensor::zeros(IMAGE_CHANNELS, IMAGE_SIDE * IMAGE_SIDE);
    for (c, &(fx, fy, phase)) in waves.iter().enumerate() {
        for y in 0..IMAGE_SIDE {
            let count = k.counts.get(y / band).copied().unwrap_or(0) as f64;
            for x in 0..IMAGE_SIDE {
                let wave = 0.5 * (fx * x as f64 + fy * y as f64 + phase).sin();
                let stripe = if (y / band) % IMAGE_CHANNELS == c { count / 9.0 } else { 0.0 };
                let n: f64 = noise_rng.sample(StandardNormal);
                img.set(c, y * IMAGE_SIDE + x, wave + stripe + 0.05 * n);
            }
        }
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBlock {
    /// `(in_channels * 9) x out_channels`.
    pub kernel: ParamId,
    pub bias: ParamId,
}

/// Three conv-relu-pool blocks (32 -> 16 -> 8 -> 4), global average
/// pooling and a linear projection.
#[derive(Clone, Debug)]
pub struct TinyConvNet {
    pub blocks: Vec<ConvBlock>,
    pub projection: Linear,
    pub width: usize,
}

impl TinyConvNet {
    pub const CHANNELS: [usize; 4] = [IMAGE_CHANNELS, 8, 16, 32];

    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        let blocks = (0..3)
            .map(|b| {
                let (cin, cout) = (Self::CHANNELS[b], Self::CHANNELS[b + 1]);
                ConvBlock {
                    kernel: store.add_glorot(format!("{name}.conv{b}.kernel"), cin * 9, cout, rng),
                    bias: store.add_zeros(format!("{name}.conv{b}.bias"), 1, cout),
                }
            })
            .collect();
        let projection = Linear::new(store, &format!("{name}.projection"), Self::CHANNELS[3], width, rng);
        Self { blocks, projection, width }
    }

    /// Features (`1 x width`) of one `channels x (side*side)` image.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        if tape.shape(image) != (IMAGE_CHANNELS, IMAGE_SIDE * IMAGE_SIDE) {
            return Err(SgnError::Shape(format!("expected a {IMAGE_CHANNELS}x{} image, got {:?}", IMAGE_SIDE * IMAGE_SIDE, tape.shape(image))));
        }
        let mut x = image;
        let mut side = IMAGE_SIDE;
        for block in &self.blocks {
            let cols = tape.im2col3x3(x, side, side);
            let k = tape.param(block.kernel);
            let y = tape.matmul(cols, k);
            let b = tape.param(block.bias);
            let y = tape.add_row(y, b);
            let y = tape.relu(y);
            let per_channel = tape.transpose(y);
            x = tape.avg_pool2(per_channel, side, side);
            side /= 2;
        }
        let sums = tape.sum_cols(x);
        let mean = tape.scale(sums, 1.0 / (side * side) as f64);
        let row = tape.transpose(mean);
        Ok(self.projection.forward(tape, row))
    }
}

/// Frozen convnet over rendered images.
#[derive(Clone, Debug)]
pub struct ConvnetProvider {
    pub store: ParamStore,
    pub net: TinyConvNet,
    pub seed: u64,
}

impl ConvnetProvider {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[&seed.to_le_bytes(), b"convnet"]));
        let net = TinyConvNet::new(&mut store, "convnet", width, &mut rng);
        Self { store, net, seed }
    }

    pub fn features(&self, key: &str) -> Result<Vec<f64>> {
        let image = render_image(key, self.seed)?;
        let mut tape = Tape::new(&self.store);
        let x = tape.constant(image);
        let f = self.net.forward(&mut tape, x)?;
        Ok(tape.value(f).data.clone())
    }
}

/// Features loaded from a feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedProvider {
    pub width: usize,
    rows: HashMap<String, Vec<f32>>,
}

impl PrecomputedProvider {
    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| SgnError::Input(format!("feature file: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut word = [0u8; 4];
        let mut u32_at = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        if u32_at(r)? != FEATURE_VERSION {
            return Err(bad("unsupported version"));
        }
        let count = u32_at(r)? as usize;
        let width = u32_at(r)? as usize;
        let mut keys = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32_at(r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            keys.push(String::from_utf8(buf).map_err(|_| bad("key is not UTF-8"))?);
        }
        let mut rows = HashMap::with_capacity(count);
        let mut buf = vec![0u8; width * 4];
        for key in keys {
            r.read_exact(&mut buf)?;
            let row = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if rows.insert(key, row).is_some() {
                return Err(bad("duplicate key"));
            }
        }
        Ok(Self { width, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn features(&self, key: &str) -> Result<Vec<f64>> {
        self.rows
            .get(key)
            .map(|r| r.iter().map(|&x| x as f64).collect())
            .ok_or_else(|| SgnError::Lookup(format!("no features for image key {key:?}")))
    }
}

/// Writes `(key, vector)` rows in the feature file format; values are
/// stored as f32.
pub fn write_feature_file(w: &mut impl Write, width: usize, rows: &[(String, Vec<f64>)]) -> Result<()> {
    if let Some((k, _)) = rows.iter().find(|(_, v)| v.len() != width) {
        return Err(SgnError::Shape(format!("feature row for {k:?} does not have width {width}")));
    }
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(rows.len() as u32).to_le_bytes())?;
    w.write_all(&(width as u32).to_le_bytes())?;
    for (k, _) in rows {
        w.write_all(&(k.len() as u32).to_le_bytes())?;
        w.write_all(k.as_bytes())?;
    }
    for (_, v) in rows {
        for &x in v {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub enum FeatureProvider {
    Synthetic(SyntheticProvider),
    Convnet(ConvnetProvider),
    Precomputed(PrecomputedProvider),
}

impl FeatureProvider {
    pub fn new(kind: ProviderKind, width: usize, seed: u64, file: Option<&Path>) -> Result<Self> {
        Ok(match kind {
            ProviderKind::SyntheticEmbedding => Self::Synthetic(SyntheticProvider::new(width, seed)),
            ProviderKind::TinyConvnet => Self::Convnet(ConvnetProvider::new(width, seed)),
            ProviderKind::PrecomputedFile => {
                let path = file.ok_or_else(|| SgnError::Config("precomputed-file provider needs a feature file".into()))?;
                let p = PrecomputedProvider::load(path)?;
                if p.width != width {
                    return Err(SgnError::Config(format!("feature file width {} differs from model width {width}", p.width)));
                }
                Self::Precomputed(p)
            }
        })
    }

    pub fn width(&self) -> usize {
        match self {
            Self::Synthetic(p) => p.width,
            Self::Convnet(p) => p.net.width,
            Self::Precomputed(p) => p.width,
        }
    }

    pub fn image_features(&self, key: &str) -> Result<Vec<f64>> {
        match self {
            Self::Synthetic(p) => p.features(key),
            Self::Convnet(p) => p.features(key),
            Self::Precomputed(p) => p.features(key),
        }
    }
}

/// Mean of the word embeddings of every ingredient token.
#[derive(Clone, Copy, Debug)]
pub struct IngredientEncoder {
    pub embedding: Embedding,
}

impl IngredientEncoder {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, width: usize, rng: &mut impl Rng) -> Self {
        Self { embedding: Embedding::new(store, &format!("{name}.embedding"), vocab, width, rng) }
    }

    pub fn width(&self) -> usize {
        self.embedding.width
    }

    /// `1 x width` feature of an ingredient list.
    pub fn features(&self, tape: &mut Tape, ingredients: &[Vec<usize>]) -> Result<Var> {
        let ids: Vec<usize> = ingredients.iter().flatten().copied().collect();
        if ids.is_empty() {
            return Err(SgnError::Input("empty ingredient list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.embedding.count) {
            return Err(SgnError::Input(format!("ingredient token {bad} outside vocabulary")));
        }
        let rows = self.embedding.forward(tape, &ids);
        Ok(tape.mean_rows(rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_features_are_deterministic_and_key_specific() {
        let p = SyntheticProvider::new(16, 3);
        let a = p.features("d001-2131-00004").unwrap();
        assert_eq!(a, p.features("d001-2131-00004").unwrap());
        assert_ne!(a, p.features("d001-2231-00004").unwrap());
        assert!(matches!(p.features("photo.jpg"), Err(SgnError::Lookup(_))));
    }

    #[test]
    fn feature_file_round_trips() {
        let rows = vec![("a".to_string(), vec![0.5, -1.25, 3.0]), ("bb".to_string(), vec![0.0, 1e-3f32 as f64, -7.5])];
        let mut buf = Vec::new();
        write_feature_file(&mut buf, 3, &rows).unwrap();
        let p = PrecomputedProvider::read_from(&mut buf.as_slice()).unwrap();
        for (k, v) in &rows {
            assert_eq!(&p.features(k).unwrap(), v);
        }
        assert!(matches!(p.features("c"), Err(SgnError::Lookup(_))));
    }

    #[test]
    fn convnet_features_have_model_width() {
        let p = ConvnetProvider::new(10, 1);
        let f = p.features("d002-1111-00000").unwrap();
        assert_eq!(f.len(), 10);
        assert_ne!(f, p.features("d002-4111-00000").unwrap());
    }

    #[test]
    fn empty_ingredients_are_rejected() {
        let mut store = ParamStore::new();
        let enc = IngredientEncoder::new(&mut store, "ing", 10, 4, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new(&store);
        assert!(matches!(enc.features(&mut tape, &[]), Err(SgnError::Input(_))));
        assert!(matches!(enc.features(&mut tape, &[vec![]]), Err(SgnError::Input(_))));
    }
}
