//! The full model: three encoders, the fusion layer and the prediction
//! heads, plus batched forward passes and checkpoint IO.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use triplex_tensor::{Graph, Real, Tensor, Var};

use crate::encoders::{
    Activation, ConvTrunk, EncoderConfig, GlobalEncoder, GridCoordinates, NeighborEncoder,
    TargetEncoder, TokenMatrix, TokenRole, NEIGHBOR_TOKENS, PATCH_SIZE, TARGET_TOKENS,
};
use crate::error::{CoreError, Result};
use crate::fusion::{FusedVars, FusionLayer, FusionOutput, HeadVars, PredictionHeads};
use crate::io::atomic_write;
use crate::nn::{Bound, ParamStore};

/// What the target encoder consumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetInput {
    /// Precomputed `49 x feature_dim` tokens per spot.
    #[default]
    Features,
    /// Raw `224 x 224` RGB patches fed through a trainable convolutional trunk.
    Images,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Width of the extracted features.
    pub feature_dim: usize,
    /// Number of predicted genes.
    pub n_genes: usize,
    pub activation: Activation,
    pub target_input: TargetInput,
    /// Seed for parameter initialisation.
    pub seed: u64,
    /// Seed of the bundled extractor; in image mode the trunk starts from
    /// the extractor's weights.
    pub extractor_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            feature_dim: 512,
            n_genes: 250,
            activation: Activation::Gelu,
            target_input: TargetInput::Features,
            seed: 2021,
            extractor_seed: 2021,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.feature_dim == 0 || self.n_genes == 0 {
            return Err(CoreError::Config(
                "feature_dim and n_genes must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Model-ready inputs of one slide. Row `i` of every tensor belongs to
/// spot `i`.
#[derive(Clone, Debug)]
pub struct SlideInputs<T> {
    pub slide_id: String,
    /// `[n, 49, feature_dim]` features, or `[n, 3, 224, 224]` images.
    pub target: Tensor<T>,
    /// `[n, 25, feature_dim]`
    pub neighbor: Tensor<T>,
    /// `[n, feature_dim]`
    pub global: Tensor<T>,
    pub coords: GridCoordinates,
}

impl<T: Real> SlideInputs<T> {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Graph handles of a batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BatchVars {
    pub z_ta: Var,
    pub z_ne: Var,
    pub z_gl: Var,
    pub fused: FusedVars,
    pub heads: HeadVars,
}

/// Copies rows `index` of `t` (slices along axis 0) into a new tensor.
pub fn gather_tensor_rows<T: Real>(t: &Tensor<T>, index: &[usize]) -> Tensor<T> {
    let row = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(index.len() * row);
    for &i in index {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = index.len();
    Tensor::new(shape, data).expect("row gather preserves the row size")
}

#[derive(Clone, Debug)]
pub struct Triplex<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub target: TargetEncoder,
    pub neighbor: NeighborEncoder,
    pub global: GlobalEncoder,
    pub fusion: FusionLayer,
    pub heads: PredictionHeads,
}

impl<T: Real> Triplex<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc = &config.encoder;
        let trunk = match config.target_input {
            TargetInput::Features => None,
            TargetInput::Images => {
                let mut trunk_rng = ChaCha8Rng::seed_from_u64(config.extractor_seed);
                Some(ConvTrunk::new(
                    &mut store,
                    "target.trunk",
                    config.feature_dim,
                    &mut trunk_rng,
                ))
            }
        };
        let target = TargetEncoder::new(
            &mut store,
            config.feature_dim,
            enc.d,
            config.activation,
            trunk,
            &mut rng,
        );
        let neighbor = NeighborEncoder::new(&mut store, config.feature_dim, enc, &mut rng);
        let global = GlobalEncoder::new(&mut store, config.feature_dim, enc, &mut rng);
        let fusion = FusionLayer::new(&mut store, enc, &mut rng);
        let heads = PredictionHeads::new(&mut store, enc.d, config.n_genes, &mut rng);
        Ok(Self {
            config,
            store,
            target,
            neighbor,
            global,
            fusion,
            heads,
        })
    }

    pub fn n_genes(&self) -> usize {
        self.config.n_genes
    }

    /// Checks that a slide's tensors fit this model.
    pub fn check_inputs(&self, s: &SlideInputs<T>) -> Result<()> {
        let n = s.len();
        let f = self.config.feature_dim;
        let target_shape = match self.config.target_input {
            TargetInput::Features => vec![n, TARGET_TOKENS, f],
            TargetInput::Images => vec![n, 3, PATCH_SIZE, PATCH_SIZE],
        };
        let checks = [
            ("target", s.target.shape().to_vec(), target_shape),
            (
                "neighbor",
                s.neighbor.shape().to_vec(),
                vec![n, NEIGHBOR_TOKENS, f],
            ),
            ("global", s.global.shape().to_vec(), vec![n, f]),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(CoreError::invalid(format!(
                    "slide {}: {what} input has shape {got:?}, expected {want:?}",
                    s.slide_id
                )));
            }
        }
        Ok(())
    }

    fn encode_target_var(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        match self.config.target_input {
            TargetInput::Features => self.target.forward(g, p, x),
            TargetInput::Images => self.target.forward_images(g, p, x),
        }
    }

    /// Forward pass over a batch of spots, `members[b] = (slide, spot)`.
    /// The global encoder runs once per distinct slide in the batch.
    pub fn forward_batch(
        &self,
        g: &mut Graph<T>,
        p: &mut Bound,
        slides: &[&SlideInputs<T>],
        members: &[(usize, usize)],
    ) -> Result<BatchVars> {
        if members.is_empty() {
            return Err(CoreError::invalid("empty batch"));
        }
        // Distinct slides in order of first appearance.
        let mut order: Vec<usize> = Vec::new();
        for &(s, _) in members {
            if !order.contains(&s) {
                order.push(s);
            }
        }
        let mut parts = Vec::with_capacity(order.len());
        let mut position = vec![0usize; members.len()];
        let mut offset = 0;
        for &s in &order {
            let slide = slides[s];
            let spots: Vec<usize> = members.iter().filter(|m| m.0 == s).map(|m| m.1).collect();
            for (b, m) in members.iter().enumerate().filter(|(_, m)| m.0 == s) {
                let k = spots.iter().position(|&x| x == m.1).expect("present");
                position[b] = offset + k;
            }
            offset += spots.len();
            let z = self.global_tokens(g, p, slide)?;
            parts.push(g.gather_rows(z, &spots)?);
        }
        let grouped = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 0)?
        };
        let z_gl = g.gather_rows(grouped, &position)?;

        let gather = |pick: fn(&SlideInputs<T>) -> &Tensor<T>| -> Vec<Tensor<T>> {
            members
                .iter()
                .map(|&(s, i)| gather_tensor_rows(pick(slides[s]), &[i]))
                .collect()
        };
        let target = concat_rows(gather(|s| &s.target));
        let neighbor = concat_rows(gather(|s| &s.neighbor));
        let target = g.constant(target);
        let neighbor = g.constant(neighbor);

        let z_ta = self.encode_target_var(g, p, target)?;
        let z_ne = self.neighbor.forward(g, p, neighbor)?;
        let fused = self.fusion.forward(g, p, z_gl, z_ta, z_ne)?;
        let heads = self.heads.forward(g, p, z_ta, z_ne, z_gl, fused.z_gtn)?;
        Ok(BatchVars {
            z_ta,
            z_ne,
            z_gl,
            fused,
            heads,
        })
    }

    /// Global tokens of a whole slide, `[n, d]`.
    pub fn global_tokens(
        &self,
        g: &mut Graph<T>,
        p: &mut Bound,
        slide: &SlideInputs<T>,
    ) -> Result<Var> {
        self.check_inputs(slide)?;
        let x = g.constant(slide.global.clone());
        self.global.forward(g, p, x, &slide.coords)
    }

    /// Fusion-head predictions for every spot of a slide, `[n, m]`, in
    /// evaluation mode (no dropout).
    pub fn predict_slide(&self, slide: &SlideInputs<T>) -> Result<Tensor<T>> {
        const CHUNK: usize = 128;
        self.check_inputs(slide)?;
        let z_gl = {
            let mut g = Graph::new();
            let mut p = Bound::new(&mut g, &self.store, false);
            let z = self.global_tokens(&mut g, &mut p, slide)?;
            g.value(z).clone()
        };
        let n = slide.len();
        let m = self.n_genes();
        let mut out = Vec::with_capacity(n * m);
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let mut g = Graph::new();
            let mut p = Bound::new(&mut g, &self.store, false);
            let zg = g.constant(gather_tensor_rows(&z_gl, &idx));
            let target = g.constant(gather_tensor_rows(&slide.target, &idx));
            let neighbor = g.constant(gather_tensor_rows(&slide.neighbor, &idx));
            let z_ta = self.encode_target_var(&mut g, &p, target)?;
            let z_ne = self.neighbor.forward(&mut g, &mut p, neighbor)?;
            let fused = self.fusion.forward(&mut g, &mut p, zg, z_ta, z_ne)?;
            let q_f = self.heads.fusion.forward(&mut g, &p, fused.z_gtn)?;
            out.extend_from_slice(g.value(q_f).data());
        }
        let pred = Tensor::new([n, m], out)?;
        if !pred.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "predictions for slide {}",
                slide.slide_id
            )));
        }
        Ok(pred)
    }

    /// Target tokens of one spot from its `49 x feature_dim` features.
    pub fn encode_target(&self, features: &Tensor<T>) -> Result<TokenMatrix<T>> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.store, false);
        let x = g.constant(with_batch_axis(features)?);
        let z = self.encode_target_var(&mut g, &p, x)?;
        let d = self.config.encoder.d;
        TokenMatrix::new(
            g.value(z).clone().reshape([TARGET_TOKENS, d])?,
            TokenRole::Target,
            TARGET_TOKENS,
        )
    }

    /// Neighbor tokens of one spot from its `25 x feature_dim` features.
    pub fn encode_neighbor(&self, features: &Tensor<T>) -> Result<TokenMatrix<T>> {
        let mut g = Graph::new();
        let mut p = Bound::new(&mut g, &self.store, false);
        let x = g.constant(with_batch_axis(features)?);
        let z = self.neighbor.forward(&mut g, &mut p, x)?;
        let d = self.config.encoder.d;
        TokenMatrix::new(
            g.value(z).clone().reshape([NEIGHBOR_TOKENS, d])?,
            TokenRole::Neighbor,
            NEIGHBOR_TOKENS,
        )
    }

    /// Global tokens of a slide from its `n x feature_dim` pooled features.
    pub fn encode_global(
        &self,
        features: &Tensor<T>,
        coords: &GridCoordinates,
    ) -> Result<TokenMatrix<T>> {
        let mut g = Graph::new();
        let mut p = Bound::new(&mut g, &self.store, false);
        let x = g.constant(features.clone());
        let z = self.global.forward(&mut g, &mut p, x, coords)?;
        TokenMatrix::new(g.value(z).clone(), TokenRole::Global, coords.len())
    }

    /// Fuses one spot's tokens and evaluates all four heads.
    pub fn fuse(
        &self,
        z_gl: &[T],
        z_ta: &TokenMatrix<T>,
        z_ne: &TokenMatrix<T>,
    ) -> Result<FusionOutput<T>> {
        let d = self.config.encoder.d;
        if z_gl.len() != d || z_ta.dim() != d || z_ne.dim() != d {
            return Err(CoreError::invalid(format!(
                "fusion expects {d}-wide tokens"
            )));
        }
        let mut g = Graph::new();
        let mut p = Bound::new(&mut g, &self.store, false);
        let zg = g.constant(Tensor::new([1, d], z_gl.to_vec())?);
        let zt = g.constant(with_batch_axis(&z_ta.tokens)?);
        let zn = g.constant(with_batch_axis(&z_ne.tokens)?);
        let fused = self.fusion.forward(&mut g, &mut p, zg, zt, zn)?;
        let heads = self.heads.forward(&mut g, &p, zt, zn, zg, fused.z_gtn)?;
        let v = |x: Var| g.value(x).to_vec();
        Ok(FusionOutput {
            z_gt: v(fused.z_gt),
            z_gn: v(fused.z_gn),
            z_gtn: v(fused.z_gtn),
            q_ta: v(heads.q_ta),
            q_ne: v(heads.q_ne),
            q_gl: v(heads.q_gl),
            q_f: v(heads.q_f),
        })
    }

    /// Copies parameters into a model of another precision.
    pub fn cast<U: Real>(&self) -> Triplex<U> {
        Triplex {
            config: self.config.clone(),
            store: self.store.cast(),
            target: self.target.clone(),
            neighbor: self.neighbor.clone(),
            global: self.global.clone(),
            fusion: self.fusion.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &self.store).map_err(|e| CoreError::io(path, e))?;
        atomic_write(path, &bytes)
    }

    /// Replaces every parameter with the checkpoint's values.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
        let arrays = read_checkpoint(&mut std::io::BufReader::new(file))?;
        self.load_arrays(arrays)
    }

    pub fn load_arrays(&mut self, arrays: Vec<NamedArray>) -> Result<()> {
        if arrays.len() != self.store.len() {
            return Err(CoreError::Checkpoint(format!(
                "checkpoint holds {} arrays, model has {}",
                arrays.len(),
                self.store.len()
            )));
        }
        for a in arrays {
            let id = self
                .store
                .id(&a.name)
                .ok_or_else(|| CoreError::Checkpoint(format!("unknown array {}", a.name)))?;
            let want = self.store.get(id).shape().to_vec();
            if a.shape != want {
                // Every head maps to the genes along its last axis.
                if a.name.starts_with("head.") && a.shape.len() == want.len() {
                    return Err(CoreError::GeneCountMismatch {
                        model: *a.shape.last().expect("non-empty shape"),
                        data: self.n_genes(),
                    });
                }
                return Err(CoreError::Checkpoint(format!(
                    "array {} has shape {:?}, model expects {want:?}",
                    a.name, a.shape
                )));
            }
            let data = a
                .data
                .iter()
                .map(|&v| T::from_f64_lossy(v as f64))
                .collect();
            self.store.set(id, Tensor::new(want, data)?)?;
        }
        Ok(())
    }
}

fn with_batch_axis<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Ok(t.clone().reshape(shape)?)
}

fn concat_rows<T: Real>(parts: Vec<Tensor<T>>) -> Tensor<T> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(shape, data).expect("rows of equal size")
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TPLXCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// One named array of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

/// Writes parameters in store order, as 32-bit floats.
pub fn write_checkpoint<T: Real, W: Write>(
    w: &mut W,
    store: &ParamStore<T>,
) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    put_u32(w, store.len())?;
    for (name, t) in store.iter() {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.ndim())?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
        for &v in t.data() {
            w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<NamedArray>> {
    let bad = |what: &str| CoreError::Checkpoint(what.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |r: &mut R| -> Result<usize> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| bad("truncated checkpoint"))?;
        Ok(u32::from_le_bytes(b) as usize)
    };
    let version = u32_at(r)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(CoreError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = u32_at(r)?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32_at(r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("array name is not UTF-8"))?;
        let rank = u32_at(r)?;
        let shape = (0..rank).map(|_| u32_at(r)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)
            .map_err(|_| bad("truncated payload"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(NamedArray { name, shape, data });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|_| bad("read error"))? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}
