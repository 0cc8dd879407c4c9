use std::io::Read;
use std::path::Path;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triplex_tensor::{Graph, Tensor};

use super::patches::{extract_neighbor_view, extract_target_patch, image_to_tensor};
use super::SlideDataset;
use crate::encoders::{ConvTrunk, NEIGHBOR_TOKENS, PATCH_SIZE, TARGET_TOKENS};
use crate::error::{CoreError, Result};
use crate::io::atomic_write;
use crate::nn::{Bound, ParamStore};

/// Extracted inputs of one slide. Row `i` of each block belongs to spot `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// `[n, 49, dim]`: the 7x7 feature map of the target patch.
    pub target: Tensor<f32>,
    /// `[n, 25, dim]`: one pooled vector per neighbor sub-patch.
    pub neighbor: Tensor<f32>,
    /// `[n, dim]`: the pooled vector of the target patch.
    pub global: Tensor<f32>,
}

impl FeatureSet {
    /// Validates the block shapes against each other.
    pub fn new(target: Tensor<f32>, neighbor: Tensor<f32>, global: Tensor<f32>) -> Result<Self> {
        let fs = Self {
            target,
            neighbor,
            global,
        };
        let n = fs.global.shape()[0];
        let dim = fs.dim();
        let ok = fs.global.ndim() == 2
            && fs.target.shape() == [n, TARGET_TOKENS, dim]
            && fs.neighbor.shape() == [n, NEIGHBOR_TOKENS, dim];
        if !ok {
            return Err(CoreError::invalid(format!(
                "inconsistent feature shapes: target {:?}, neighbor {:?}, global {:?}",
                fs.target.shape(),
                fs.neighbor.shape(),
                fs.global.shape()
            )));
        }
        if !(fs.target.is_finite() && fs.neighbor.is_finite() && fs.global.is_finite()) {
            return Err(CoreError::NonFinite("features".into()));
        }
        Ok(fs)
    }

    pub fn n(&self) -> usize {
        self.global.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.global.shape()[self.global.ndim() - 1]
    }

    /// Keeps rows `index`, in that order.
    pub fn select(&self, index: &[usize]) -> Self {
        use crate::model::gather_tensor_rows;
        Self {
            target: gather_tensor_rows(&self.target, index),
            neighbor: gather_tensor_rows(&self.neighbor, index),
            global: gather_tensor_rows(&self.global, index),
        }
    }

    fn paths(dir: &Path, slide_id: &str) -> [std::path::PathBuf; 3] {
        ["target", "neighbor", "global"].map(|b| dir.join(format!("{slide_id}.{b}.feat")))
    }

    /// Writes `<slide>.target.feat`, `<slide>.neighbor.feat` and
    /// `<slide>.global.feat` into `dir`.
    pub fn save(&self, dir: &Path, slide_id: &str) -> Result<()> {
        let [t, nb, gl] = Self::paths(dir, slide_id);
        write_feature_file(&t, &self.target)?;
        write_feature_file(&nb, &self.neighbor)?;
        let n = self.n();
        write_feature_file(&gl, &self.global.clone().reshape([n, 1, self.dim()])?)
    }

    pub fn load(dir: &Path, slide_id: &str) -> Result<Self> {
        let [t, nb, gl] = Self::paths(dir, slide_id);
        let target = read_feature_file(&t)?;
        let neighbor = read_feature_file(&nb)?;
        let global = read_feature_file(&gl)?;
        let (n, tokens, dim) = (global.shape()[0], global.shape()[1], global.shape()[2]);
        if tokens != 1 {
            return Err(CoreError::FeatureFile {
                path: gl,
                reason: format!("global features must have 1 token, found {tokens}"),
            });
        }
        Self::new(target, neighbor, global.reshape([n, dim])?)
    }
}

const FEATURE_MAGIC: &[u8; 8] = b"TPLXFEAT";
const FEATURE_VERSION: u32 = 1;

/// Writes a `[n, tokens, dim]` block.
pub fn write_feature_file(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if t.ndim() != 3 {
        return Err(CoreError::invalid(format!(
            "feature block must be rank 3, got {:?}",
            t.shape()
        )));
    }
    let mut bytes = Vec::with_capacity(24 + 4 * t.numel());
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    for &d in t.shape() {
        let d =
            u32::try_from(d).map_err(|_| CoreError::invalid("feature dimension exceeds u32"))?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &bytes)
}

/// Reads a block written by [`write_feature_file`], as `[n, tokens, dim]`.
pub fn read_feature_file(path: &Path) -> Result<Tensor<f32>> {
    let bad = |reason: &str| CoreError::FeatureFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| CoreError::io(path, e))?;
    if bytes.len() < 24 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("missing TPLXFEAT header"));
    }
    let word = |i: usize| {
        u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    if word(0) != FEATURE_VERSION as usize {
        return Err(bad(&format!("unsupported version {}", word(0))));
    }
    let shape = vec![word(1), word(2), word(3)];
    if shape.contains(&0) {
        return Err(bad("zero-sized dimension"));
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != 24 + 4 * numel {
        return Err(bad(&format!(
            "payload holds {} bytes, header declares {shape:?}",
            bytes.len() - 24
        )));
    }
    let data: Vec<f32> = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let t = Tensor::new(shape, data)?;
    if !t.is_finite() {
        return Err(bad("non-finite values"));
    }
    Ok(t)
}

/// Per-patch outputs of a feature extractor.
#[derive(Clone, Debug)]
pub struct ExtractorOutput {
    /// `[N, 49, dim]`: the 7x7 map, row-major.
    pub map: Tensor<f32>,
    /// `[N, dim]`
    pub pooled: Tensor<f32>,
}

/// Maps 224 x 224 RGB patches to a 7 x 7 feature map and a pooled vector.
/// Implementations must be deterministic.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;

    /// `patches: [N, 3, 224, 224]` with values in `[0, 1]`.
    fn extract(&self, patches: &Tensor<f32>) -> Result<ExtractorOutput>;
}

/// The bundled convolutional extractor with seeded random weights.
#[derive(Clone, Debug)]
pub struct ToyExtractor {
    pub store: ParamStore<f32>,
    pub trunk: ConvTrunk,
}

impl ToyExtractor {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = ConvTrunk::new(&mut store, "trunk", dim, &mut rng);
        Self { store, trunk }
    }
}

impl FeatureExtractor for ToyExtractor {
    fn dim(&self) -> usize {
        self.trunk.out_dim
    }

    fn extract(&self, patches: &Tensor<f32>) -> Result<ExtractorOutput> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.store, false);
        let x = g.constant(patches.clone());
        let (map, pooled) = self.trunk.forward_pooled(&mut g, &p, x)?;
        Ok(ExtractorOutput {
            map: g.value(map).clone(),
            pooled: g.value(pooled).clone(),
        })
    }
}

/// Runs `extractor` over the target patch and the 25 neighbor sub-patches
/// of every spot.
pub fn extract_features(
    extractor: &dyn FeatureExtractor,
    slide_image: &RgbImage,
    dataset: &SlideDataset,
) -> Result<FeatureSet> {
    let dim = extractor.dim();
    let n = dataset.n();
    let mut target = Vec::with_capacity(n * TARGET_TOKENS * dim);
    let mut neighbor = Vec::with_capacity(n * NEIGHBOR_TOKENS * dim);
    let mut global = Vec::with_capacity(n * dim);
    let plane = 3 * PATCH_SIZE * PATCH_SIZE;
    for spot in &dataset.spots {
        let (cx, cy) = (spot.pixel_x, spot.pixel_y);
        let mut batch = Vec::with_capacity((1 + NEIGHBOR_TOKENS) * plane);
        batch
            .extend(image_to_tensor::<f32>(&extract_target_patch(slide_image, cx, cy)).into_data());
        for tile in extract_neighbor_view(slide_image, cx, cy) {
            batch.extend(image_to_tensor::<f32>(&tile).into_data());
        }
        let batch = Tensor::new([1 + NEIGHBOR_TOKENS, 3, PATCH_SIZE, PATCH_SIZE], batch)?;
        let out = extractor.extract(&batch)?;
        if out.map.shape() != [1 + NEIGHBOR_TOKENS, TARGET_TOKENS, dim]
            || out.pooled.shape() != [1 + NEIGHBOR_TOKENS, dim]
        {
            return Err(CoreError::invalid(
                "extractor output violates the 7x7 map contract",
            ));
        }
        if !(out.map.is_finite() && out.pooled.is_finite()) {
            return Err(CoreError::NonFinite(format!(
                "extractor output for spot {}",
                spot.spot_id
            )));
        }
        target.extend_from_slice(&out.map.data()[..TARGET_TOKENS * dim]);
        global.extend_from_slice(&out.pooled.data()[..dim]);
        neighbor.extend_from_slice(&out.pooled.data()[dim..]);
    }
    FeatureSet::new(
        Tensor::new([n, TARGET_TOKENS, dim], target)?,
        Tensor::new([n, NEIGHBOR_TOKENS, dim], neighbor)?,
        Tensor::new([n, dim], global)?,
    )
}
