//! Two-branch restoration network: an illumination-aware multi-scale
//! restoration branch and a gradient branch, fused before the output convolutions.
//!
//! Restoration branch: a head convolution feeds three streams at full, half and
//! quarter resolution (strided convolutions down). Each stream runs a
//! multi-dilated block, then the illumination guidance block on the full-size
//! stream or non-local sparse attention on the two smaller ones, then a residual
//! contextual block. Streams are fused bottom-up with attention feature fusion
//! after bilinear upsampling and a pointwise projection.
//!
//! Gradient branch: a convolution over the coarse gradient map, a merge
//! convolution with the full-size stream features, two residual contextual
//! blocks, and the output convolution producing the restored gradient map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tidewater_autograd::{Tensor, Var};

use crate::model::{
    ensure_finite, BoundWeights, LayoutBuilder, ModelError, NetInputs, NetOutput, Network, ParamSpec, Result,
};

const SLOPE: f64 = 0.2;
const NUM_STREAMS: usize = 3;
const HASH_SEED: u64 = 0x5eed_4a54;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub num_streams: usize,
    pub mdb_dilations: Vec<usize>,
    pub use_nlsa: bool,
    pub use_deformable: bool,
    /// Training patch `(height, width)`; both divisible by 4.
    pub patch_size: (usize, usize),
    /// Channel reduction of the squeeze-excitation style attention.
    pub attention_reduction: usize,
    /// Sequence chunk length of the sparse attention.
    pub nlsa_chunk: usize,
    /// Hash buckets of the sparse attention (even).
    pub nlsa_buckets: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small CPU-friendly configuration: narrow streams, standard convolution
    /// in place of the deformable one, identity in place of sparse attention.
    pub fn desk() -> Self {
        Self {
            base_channels: 8,
            num_streams: NUM_STREAMS,
            mdb_dilations: vec![1, 2, 3, 4],
            use_nlsa: false,
            use_deformable: false,
            patch_size: (32, 32),
            attention_reduction: 4,
            nlsa_chunk: 16,
            nlsa_buckets: 8,
        }
    }

    /// Full configuration with every block enabled; close to 1.675M parameters.
    pub fn full_scale() -> Self {
        Self { base_channels: 34, use_nlsa: true, use_deformable: true, patch_size: (256, 256), ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.num_streams != NUM_STREAMS {
            return bad(format!("num_streams must be {NUM_STREAMS}, got {}", self.num_streams));
        }
        if self.mdb_dilations.is_empty() || self.mdb_dilations.contains(&0) {
            return bad("mdb_dilations must be non-empty and all >= 1".into());
        }
        let m = self.size_multiple();
        let (h, w) = self.patch_size;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return bad(format!("patch size {h}x{w} must be positive multiples of {m}"));
        }
        if self.attention_reduction == 0 || self.nlsa_chunk == 0 {
            return bad("attention_reduction and nlsa_chunk must be positive".into());
        }
        if self.nlsa_buckets < 2 || self.nlsa_buckets % 2 != 0 {
            return bad("nlsa_buckets must be an even number >= 2".into());
        }
        Ok(())
    }

    pub fn size_multiple(&self) -> usize {
        1 << (self.num_streams.max(1) - 1)
    }

    fn width(&self, stream: usize) -> usize {
        self.base_channels << stream
    }

    fn reduced(&self, c: usize) -> usize {
        (c / self.attention_reduction).max(1)
    }

    fn embed_width(&self, c: usize) -> usize {
        (c / 4).max(1)
    }
}

#[derive(Clone, Debug)]
pub struct AimNet {
    pub config: ModelConfig,
}

impl AimNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn layout_rcb(&self, b: &mut LayoutBuilder, name: &str, c: usize) {
        let r = self.config.reduced(c);
        b.conv(&format!("{name}.conv1"), c, c, 3);
        b.conv(&format!("{name}.conv2"), c, c, 3);
        b.conv(&format!("{name}.ca1"), c, r, 1);
        b.conv(&format!("{name}.ca2"), r, c, 1);
    }

    fn layout_aff(&self, b: &mut LayoutBuilder, name: &str, c: usize) {
        b.conv(&format!("{name}.fuse"), 2 * c, c, 1);
        b.conv(&format!("{name}.local"), c, c, 1);
        b.conv(&format!("{name}.global"), c, c, 1);
    }
}

impl Network for AimNet {
    fn digest(&self) -> String {
        let json = serde_json::to_string(&self.config).expect("config serializes");
        hex::encode(Sha256::digest(format!("aimnet:{json}").as_bytes()))
    }

    fn size_multiple(&self) -> usize {
        self.config.size_multiple()
    }

    fn layout(&self) -> Vec<ParamSpec> {
        let cfg = &self.config;
        let c = cfg.base_channels;
        let mut b = LayoutBuilder::default();
        b.conv("head", 3, c, 3);
        b.conv("illum", 1, c, 3);
        for s in 1..NUM_STREAMS {
            b.conv(&format!("down{s}"), cfg.width(s - 1), cfg.width(s), 3);
        }
        for s in 0..NUM_STREAMS {
            let cs = cfg.width(s);
            for d in &cfg.mdb_dilations {
                b.conv(&format!("s{s}.mdb.d{d}"), cs, cs, 3);
            }
            b.conv(&format!("s{s}.mdb.fuse"), cs * cfg.mdb_dilations.len(), cs, 1);
            if s == 0 {
                b.conv("s0.igb.gamma", cs, cs, 1);
                b.conv("s0.igb.beta", cs, cs, 1);
                if cfg.use_deformable {
                    b.conv("s0.igb.offset", cs, 18, 3);
                }
                b.conv("s0.igb.conv", cs, cs, 3);
            } else if cfg.use_nlsa {
                b.conv(&format!("s{s}.nlsa.embed"), cs, cfg.embed_width(cs), 1);
                b.conv(&format!("s{s}.nlsa.value"), cs, cs, 1);
            }
            self.layout_rcb(&mut b, &format!("s{s}.rcb"), cs);
        }
        for s in (1..NUM_STREAMS).rev() {
            b.conv(&format!("up{s}"), cfg.width(s), cfg.width(s - 1), 1);
            self.layout_aff(&mut b, &format!("aff{}", s - 1), cfg.width(s - 1));
        }
        b.conv("grad.in", 1, c, 3);
        b.conv("grad.merge", 2 * c, c, 3);
        self.layout_rcb(&mut b, "grad.rcb1", c);
        self.layout_rcb(&mut b, "grad.rcb2", c);
        self.layout_aff(&mut b, "aff_out", c);
        b.conv("tail", c, 3, 3);
        b.conv("grad.tail", c, 1, 3);
        b.specs
    }

    fn forward<'g>(&self, w: &BoundWeights<'g>, inputs: &NetInputs<'g>) -> Result<NetOutput<'g>> {
        let cfg = &self.config;
        let shape = inputs.image.shape();
        let (n, h, wd) = match shape.as_slice() {
            &[n, 3, h, wd] => (n, h, wd),
            other => return Err(ModelError::ShapeMismatch(format!("image input {other:?}"))),
        };
        for (what, v) in [("illumination", &inputs.illumination), ("gradient", &inputs.gradient)] {
            if v.shape() != [n, 1, h, wd] {
                return Err(ModelError::ShapeMismatch(format!("{what} {:?} vs image {shape:?}", v.shape())));
            }
        }
        let m = cfg.size_multiple();
        if h % m != 0 || wd % m != 0 {
            return Err(ModelError::ShapeMismatch(format!("{h}x{wd} is not a multiple of {m}")));
        }

        let head = w.conv(&inputs.image, "head", 1, 1, 1)?.leaky_relu(SLOPE);
        let illum = w.conv(&inputs.illumination, "illum", 1, 1, 1)?.leaky_relu(SLOPE);

        let mut stream_inputs = vec![head];
        for s in 1..NUM_STREAMS {
            let prev = stream_inputs[s - 1];
            stream_inputs.push(w.conv(&prev, &format!("down{s}"), 2, 1, 1)?.leaky_relu(SLOPE));
        }

        let mut streams = Vec::with_capacity(NUM_STREAMS);
        for (s, x) in stream_inputs.iter().enumerate() {
            let mut f = self.mdb(w, x, &format!("s{s}.mdb"))?;
            if s == 0 {
                f = self.igb(w, &f, &illum)?;
            } else if cfg.use_nlsa {
                f = self.nlsa(w, &f, &format!("s{s}.nlsa"), s)?;
            }
            streams.push(self.rcb(w, &f, &format!("s{s}.rcb"))?);
        }
        ensure_finite(&streams[NUM_STREAMS - 1], "restoration streams")?;

        let mut fused = streams[NUM_STREAMS - 1];
        for s in (1..NUM_STREAMS).rev() {
            let target = streams[s - 1].shape();
            let up = fused.resize(target[2], target[3])?;
            let up = w.conv(&up, &format!("up{s}"), 1, 0, 1)?;
            fused = self.aff(w, &streams[s - 1], &up, &format!("aff{}", s - 1))?;
        }

        let g = w.conv(&inputs.gradient, "grad.in", 1, 1, 1)?.leaky_relu(SLOPE);
        let g = w.conv(&Var::concat(&[g, streams[0]])?, "grad.merge", 1, 1, 1)?.leaky_relu(SLOPE);
        let g = self.rcb(w, &g, "grad.rcb1")?;
        let g = self.rcb(w, &g, "grad.rcb2")?;

        let out = self.aff(w, &fused, &g, "aff_out")?;
        let restored = w.conv(&out, "tail", 1, 1, 1)?;
        let gradient = w.conv(&g, "grad.tail", 1, 1, 1)?;
        ensure_finite(&restored, "restored output")?;
        ensure_finite(&gradient, "gradient output")?;
        Ok(NetOutput { restored, gradient })
    }
}

impl AimNet {
    /// Parallel dilated convolutions, concatenated, projected, residual.
    fn mdb<'g>(&self, w: &BoundWeights<'g>, x: &Var<'g>, name: &str) -> Result<Var<'g>> {
        let branches = self
            .config
            .mdb_dilations
            .iter()
            .map(|&d| Ok(w.conv(x, &format!("{name}.d{d}"), 1, d, d)?.leaky_relu(SLOPE)))
            .collect::<Result<Vec<_>>>()?;
        let fused = w.conv(&Var::concat(&branches)?, &format!("{name}.fuse"), 1, 0, 1)?;
        Ok(x.add(&fused)?)
    }

    /// Spatial feature transform from the illumination features, then a
    /// (deformable) convolution, residual.
    fn igb<'g>(&self, w: &BoundWeights<'g>, x: &Var<'g>, illum: &Var<'g>) -> Result<Var<'g>> {
        let gamma = w.conv(illum, "s0.igb.gamma", 1, 0, 1)?;
        let beta = w.conv(illum, "s0.igb.beta", 1, 0, 1)?;
        let modulated = x.add(&x.mul(&gamma)?)?.add(&beta)?;
        let y = if self.config.use_deformable {
            let offset = w.conv(&modulated, "s0.igb.offset", 1, 1, 1)?;
            let k = w.get("s0.igb.conv.weight")?;
            let b = w.get("s0.igb.conv.bias")?;
            modulated.deform_conv2d(&offset, &k, Some(&b), 1)?
        } else {
            w.conv(&modulated, "s0.igb.conv", 1, 1, 1)?
        };
        Ok(x.add(&y.leaky_relu(SLOPE))?)
    }

    /// Convolution pair with channel attention, residual.
    fn rcb<'g>(&self, w: &BoundWeights<'g>, x: &Var<'g>, name: &str) -> Result<Var<'g>> {
        let a = w.conv(x, &format!("{name}.conv1"), 1, 1, 1)?.leaky_relu(SLOPE);
        let b = w.conv(&a, &format!("{name}.conv2"), 1, 1, 1)?;
        let s = w.conv(&b.global_avg_pool()?, &format!("{name}.ca1"), 1, 0, 1)?.leaky_relu(SLOPE);
        let s = w.conv(&s, &format!("{name}.ca2"), 1, 0, 1)?.sigmoid();
        Ok(x.add(&b.mul_channel(&s)?)?)
    }

    /// Attention feature fusion: weights from local (3×3 pooled) and global
    /// descriptors of the joint features select between `a` and `b`.
    fn aff<'g>(&self, w: &BoundWeights<'g>, a: &Var<'g>, b: &Var<'g>, name: &str) -> Result<Var<'g>> {
        let z = w.conv(&Var::concat(&[*a, *b])?, &format!("{name}.fuse"), 1, 0, 1)?.leaky_relu(SLOPE);
        let local = w.conv(&z.box3()?, &format!("{name}.local"), 1, 0, 1)?;
        let global = w.conv(&z.global_avg_pool()?, &format!("{name}.global"), 1, 0, 1)?;
        let weight = local.add_channel(&global)?.sigmoid();
        Ok(b.add(&weight.mul(&a.sub(b)?)?)?)
    }

    /// Non-local sparse attention: positions are bucketed by a fixed random
    /// rotation hash of their embeddings, sorted by bucket, cut into chunks, and
    /// each chunk attends over itself and the preceding chunk.
    fn nlsa<'g>(&self, w: &BoundWeights<'g>, x: &Var<'g>, name: &str, stream: usize) -> Result<Var<'g>> {
        let shape = x.shape();
        let (n, c, h, wd) = (shape[0], shape[1], shape[2], shape[3]);
        let len = h * wd;
        let ce = self.config.embed_width(c);
        let chunk = self.config.nlsa_chunk.min(len);
        let chunks = len.div_ceil(chunk);
        let padded = chunks * chunk;

        let to_rows = |v: Var<'g>, ch: usize| -> Result<Var<'g>> { Ok(v.reshape(vec![n, ch, len])?.transpose()?) };
        let embed = to_rows(w.conv(x, &format!("{name}.embed"), 1, 0, 1)?, ce)?;
        let value = to_rows(w.conv(x, &format!("{name}.value"), 1, 0, 1)?, c)?;

        let rotation = hash_rotation(ce, self.config.nlsa_buckets / 2, stream);
        let ev = embed.value();
        let mut query_idx = Vec::with_capacity(n * padded);
        let mut key_idx = Vec::with_capacity(n * chunks * 2 * chunk);
        let mut unsort_idx = Vec::with_capacity(n * len);
        for s in 0..n {
            let rows = &ev.data()[s * len * ce..(s + 1) * len * ce];
            let mut order: Vec<usize> = (0..len).collect();
            let buckets: Vec<usize> = (0..len).map(|p| bucket(&rows[p * ce..(p + 1) * ce], &rotation)).collect();
            order.sort_by_key(|&p| (buckets[p], p));
            let sorted: Vec<usize> = (0..padded).map(|i| order[i % len]).collect();
            query_idx.extend(&sorted);
            for j in 0..chunks {
                let prev = (j + chunks - 1) % chunks;
                key_idx.extend(&sorted[j * chunk..(j + 1) * chunk]);
                key_idx.extend(&sorted[prev * chunk..(prev + 1) * chunk]);
            }
            let mut inverse = vec![0; len];
            for (i, &p) in order.iter().enumerate() {
                inverse[p] = i;
            }
            unsort_idx.extend(inverse);
        }

        let q = embed.gather_rows(&query_idx)?.reshape(vec![n * chunks, chunk, ce])?;
        let k = embed.gather_rows(&key_idx)?.reshape(vec![n * chunks, 2 * chunk, ce])?;
        let v = value.gather_rows(&key_idx)?.reshape(vec![n * chunks, 2 * chunk, c])?;
        let attn = q.matmul(&k.transpose()?)?.scale(1.0 / (ce as f64).sqrt()).softmax();
        let out = attn.matmul(&v)?.reshape(vec![n, padded, c])?;
        let out = out.gather_rows(&unsort_idx)?.transpose()?.reshape(vec![n, c, h, wd])?;
        Ok(x.add(&out)?)
    }
}

/// Fixed Gaussian projection `[ce, half]` for the bucket hash of one stream.
fn hash_rotation(ce: usize, half: usize, stream: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(HASH_SEED + stream as u64);
    let data = (0..ce * half)
        .map(|_| {
            // Box-Muller from two uniforms.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::new(vec![ce, half], data).expect("rotation shape")
}

/// Index of the largest entry of `[xR, −xR]`.
fn bucket(row: &[f64], rotation: &Tensor) -> usize {
    let half = rotation.shape()[1];
    let r = rotation.data();
    let mut best = (f64::NEG_INFINITY, 0);
    for j in 0..half {
        let p: f64 = row.iter().enumerate().map(|(i, v)| v * r[i * half + j]).sum();
        if p > best.0 {
            best = (p, j);
        }
        if -p > best.0 {
            best = (-p, half + j);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hash_buckets_are_in_range() {
        let rot = hash_rotation(3, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let row: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert!(bucket(&row, &rot) < 8);
        }
    }
}
