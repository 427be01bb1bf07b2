//! Images, the patch-feature backbone and the patch embedder (layer norm + projection).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Builder, ParamSet};
use crate::tensor_file;

/// Layer-norm epsilon for raw backbone features. Kept far below the feature variance of a
/// freshly initialized backbone so normalization is effectively scale-free.
pub const PATCH_LN_EPS: f64 = 1e-12;

/// RGB image stored as `(H·W) × 3`, raster order, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub pixels: Array2<f32>,
    pub source: Option<PathBuf>,
}

impl Image {
    pub fn zeros(size: usize) -> Self {
        Self { size, pixels: Array2::zeros((size * size, 3)), source: None }
    }

    pub fn from_rgb8(size: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != size * size * 3 {
            return Err(Error::Shape(format!("{} bytes for a {size}×{size} RGB image", rgb.len())));
        }
        let pixels = Array2::from_shape_vec((size * size, 3), rgb.iter().map(|&b| b as f32 / 255.0).collect()).expect("checked");
        Ok(Self { size, pixels, source: None })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Load a PNG or binary PPM, resizing to `size × size` when needed.
    pub fn load(path: &Path, size: usize) -> Result<Self> {
        let img = ::image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?.to_rgb8();
        let img = if img.width() as usize != size || img.height() as usize != size {
            ::image::imageops::resize(&img, size as u32, size as u32, ::image::imageops::FilterType::Triangle)
        } else {
            img
        };
        let mut out = Self::from_rgb8(size, img.as_raw())?;
        out.source = Some(path.to_path_buf());
        Ok(out)
    }

    /// Write as binary PPM (P6).
    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.size, self.size).into_bytes();
        bytes.extend(self.to_rgb8());
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Stack of 2×2 stride-2 convolutions trained from scratch.
    TinyConv,
    /// Features are read from `MVQT` files; no backbone parameters.
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub image_size: usize,
    /// Patch grid side `G`; the image yields `G²` patches.
    pub grid: usize,
    pub feature_dim: usize,
    /// Output channels of every stage except the last (which emits `feature_dim`).
    pub hidden_channels: Vec<usize>,
    pub trainable: bool,
}

impl BackboneConfig {
    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Number of stride-2 stages between the image and the grid.
    pub fn stages(&self) -> Result<usize> {
        if self.grid == 0 || self.image_size % self.grid != 0 || !(self.image_size / self.grid).is_power_of_two() || self.image_size == self.grid {
            return Err(Error::Invalid(format!(
                "image size {} must be the grid {} times a power of two greater than one",
                self.image_size, self.grid
            )));
        }
        Ok((self.image_size / self.grid).trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.grid == 0 {
            return Err(Error::Invalid("feature_dim and grid must be positive".into()));
        }
        if self.kind == BackboneKind::TinyConv {
            let stages = self.stages()?;
            if self.hidden_channels.len() + 1 != stages {
                return Err(Error::Invalid(format!("{} stages need {} hidden channel widths, got {}", stages, stages - 1, self.hidden_channels.len())));
            }
        }
        Ok(())
    }
}

/// Raw `M × d_v` patch features, row `r·G + c` for grid cell `(r, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePatchGrid {
    pub values: Array2<f32>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Computed,
    Precomputed(PathBuf),
}

impl FeaturePatchGrid {
    pub fn num_patches(&self) -> usize {
        self.values.nrows()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tensor_file::write_matrix(path, &self.values)
    }
}

/// Load a precomputed grid and check it against the configured `M × d_v`.
pub fn load_precomputed_features(path: &Path, cfg: &BackboneConfig) -> Result<FeaturePatchGrid> {
    let values = tensor_file::read_matrix(path)?;
    let want = (cfg.num_patches(), cfg.feature_dim);
    if values.dim() != want {
        return Err(Error::Shape(format!("{}: feature file is {:?}, config expects {:?}", path.display(), values.dim(), want)));
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    Ok(FeaturePatchGrid { values, provenance: Provenance::Precomputed(path.to_path_buf()) })
}

/// What the model sees of an image.
#[derive(Debug, Clone, PartialEq)]
pub enum Visual {
    Pixels(Image),
    Features(FeaturePatchGrid),
}

/// Strided 2×2 convolutions. Every stage only mixes pixels within one 2×2 cell, so each
/// output patch depends on exactly its own `size/G × size/G` block of the image.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stages: Vec<Linear>,
    pub image_size: usize,
}

/// Flat-index map taking `B` stacked `(s·s) × c` images to `(s/2·s/2) × 4c`.
fn space_to_depth_map(batch: usize, side: usize, channels: usize) -> Vec<u32> {
    let half = side / 2;
    let mut map = Vec::with_capacity(batch * side * side * channels);
    for b in 0..batch {
        for i in 0..half {
            for j in 0..half {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let row = b * side * side + (2 * i + dy) * side + (2 * j + dx);
                    map.extend((0..channels).map(|c| (row * channels + c) as u32));
                }
            }
        }
    }
    map
}

impl Backbone {
    pub fn new<F: Float>(b: &mut Builder<F>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut c_in = 3;
        let widths = cfg.hidden_channels.iter().copied().chain(std::iter::once(cfg.feature_dim));
        for (i, c_out) in widths.enumerate() {
            stages.push(Linear::new(b, &format!("backbone.stage{i}"), 4 * c_in, c_out)?);
            c_in = c_out;
        }
        Ok(Self { stages, image_size: cfg.image_size })
    }

    /// `pixels`: `B·size² × 3` stacked images. Returns `B·G² × d_v`.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, pixels: Var, batch: usize) -> Var {
        let mut x = pixels;
        let mut side = self.image_size;
        let mut channels = 3;
        let last = self.stages.len() - 1;
        for (i, stage) in self.stages.iter().enumerate() {
            let map = space_to_depth_map(batch, side, channels);
            side /= 2;
            x = g.permute(x, (batch * side * side, 4 * channels), map);
            x = stage.forward(g, x);
            if i != last {
                x = g.gelu(x);
            }
            channels = stage.d_out;
        }
        x
    }
}

/// Run the backbone on one image.
pub fn extract_patch_features<F: Float>(image: &Image, backbone: &Backbone, params: &ParamSet<F>) -> Result<FeaturePatchGrid> {
    if image.size != backbone.image_size || image.pixels.dim() != (image.size * image.size, 3) {
        return Err(Error::Shape(format!("image is {}×{}, backbone expects {}", image.size, image.size, backbone.image_size)));
    }
    let mut g = Graph::new(params);
    let px = g.constant(image.pixels.mapv(|x| F::lit(x as f64)));
    let out = backbone.forward(&mut g, px, 1);
    let values = g.value(out).mapv(|x| x.as_f64() as f32);
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("backbone output".into()));
    }
    Ok(FeaturePatchGrid { values, provenance: Provenance::Computed })
}

/// Layer norm over raw features followed by the projection into the model space.
#[derive(Debug, Clone)]
pub struct PatchEmbedder {
    pub ln: LayerNorm,
    pub proj: Linear,
}

impl PatchEmbedder {
    pub fn new<F: Float>(b: &mut Builder<F>, feature_dim: usize, model_dim: usize) -> Result<Self> {
        let mut ln = LayerNorm::new(b, "image.ln", feature_dim)?;
        ln.eps = PATCH_LN_EPS;
        Ok(Self { ln, proj: Linear::new(b, "image.proj", feature_dim, model_dim)? })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, raw: Var) -> Var {
        let x = self.ln.forward(g, raw);
        self.proj.forward(g, x)
    }
}

pub fn normalize_and_project<F: Float>(grid: &FeaturePatchGrid, embedder: &PatchEmbedder, params: &ParamSet<F>) -> Result<Array2<F>> {
    if grid.values.ncols() != embedder.proj.d_in {
        return Err(Error::Shape(format!("feature dim {} vs projector input {}", grid.values.ncols(), embedder.proj.d_in)));
    }
    let mut g = Graph::new(params);
    let raw = g.constant(grid.values.mapv(|x| F::lit(x as f64)));
    let out = embedder.forward(&mut g, raw);
    Ok(g.value(out).clone())
}

/// Stack the raw features for a batch of visuals into one `B·M × d_v` node.
pub fn raw_features<F: Float>(g: &mut Graph<F>, backbone: Option<&Backbone>, visuals: &[&Visual], cfg: &BackboneConfig) -> Result<Var> {
    match cfg.kind {
        BackboneKind::TinyConv => {
            let backbone = backbone.ok_or_else(|| Error::Invalid("tiny-conv config without backbone parameters".into()))?;
            let mut stacked = Array2::zeros((visuals.len() * cfg.image_size * cfg.image_size, 3));
            for (i, v) in visuals.iter().enumerate() {
                let Visual::Pixels(img) = v else {
                    return Err(Error::Invalid("tiny-conv backbone needs pixel images, got precomputed features".into()));
                };
                if img.size != cfg.image_size {
                    return Err(Error::Shape(format!("image size {} vs configured {}", img.size, cfg.image_size)));
                }
                let n = img.size * img.size;
                stacked.slice_mut(ndarray::s![i * n..(i + 1) * n, ..]).assign(&img.pixels.mapv(|x| F::lit(x as f64)));
            }
            let px = g.constant(stacked);
            let out = backbone.forward(g, px, visuals.len());
            if !cfg.trainable {
                return Ok(g.detach(out));
            }
            Ok(out)
        }
        BackboneKind::Precomputed => {
            let mut parts = Vec::with_capacity(visuals.len());
            for v in visuals {
                let Visual::Features(f) = v else {
                    return Err(Error::Invalid("precomputed backbone needs feature files, got pixels".into()));
                };
                if f.values.dim() != (cfg.num_patches(), cfg.feature_dim) {
                    return Err(Error::Shape(format!("feature grid {:?} vs configured {:?}", f.values.dim(), (cfg.num_patches(), cfg.feature_dim))));
                }
                parts.push(f.values.mapv(|x| F::lit(x as f64)));
            }
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            let stacked = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
            Ok(g.constant(stacked))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk_cfg() -> BackboneConfig {
        BackboneConfig { kind: BackboneKind::TinyConv, image_size: 32, grid: 4, feature_dim: 32, hidden_channels: vec![8, 16], trainable: true }
    }

    fn random_image(size: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image { size, pixels: Array2::from_shape_simple_fn((size * size, 3), || rng.gen()), source: None }
    }

    #[test]
    fn desk_grid_shape() {
        let cfg = desk_cfg();
        let mut ps = ParamSet::<f32>::new();
        let bb = Backbone::new(&mut Builder::init(&mut ps, ChaCha8Rng::seed_from_u64(0)), &cfg).unwrap();
        let grid = extract_patch_features(&random_image(32, 1), &bb, &ps).unwrap();
        assert_eq!(grid.values.dim(), (16, 32));
        assert!(extract_patch_features(&random_image(16, 1), &bb, &ps).is_err());
    }

    #[test]
    fn paper_grid_shape() {
        let cfg = BackboneConfig { kind: BackboneKind::TinyConv, image_size: 256, grid: 8, feature_dim: 2048, hidden_channels: vec![4, 4, 4, 4], trainable: true };
        let mut ps = ParamSet::<f32>::new();
        let bb = Backbone::new(&mut Builder::init(&mut ps, ChaCha8Rng::seed_from_u64(0)), &cfg).unwrap();
        assert_eq!(extract_patch_features(&random_image(256, 2), &bb, &ps).unwrap().values.dim(), (64, 2048));
    }

    #[test]
    fn zero_image_zero_weights_gives_zero_grid() {
        let cfg = desk_cfg();
        let mut ps = ParamSet::<f32>::new();
        let bb = Backbone::new(&mut Builder::init(&mut ps, ChaCha8Rng::seed_from_u64(0)), &cfg).unwrap();
        let ids: Vec<_> = ps.iter().map(|(id, _)| id).collect();
        for id in ids {
            ps.value_mut(id).fill(0.0);
        }
        let grid = extract_patch_features(&Image::zeros(32), &bb, &ps).unwrap();
        assert!(grid.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn patch_locality_in_raster_order() {
        let cfg = desk_cfg();
        let mut ps = ParamSet::<f64>::new();
        let bb = Backbone::new(&mut Builder::init(&mut ps, ChaCha8Rng::seed_from_u64(4)), &cfg).unwrap();
        let base = random_image(32, 5);
        let before = extract_patch_features(&base, &bb, &ps).unwrap();
        // perturb the block of grid cell (r, c) = (1, 2): pixels rows 8..16, cols 16..24
        let mut changed = base.clone();
        for y in 8..16 {
            for x in 16..24 {
                changed.pixels[[y * 32 + x, 0]] = 1.0 - changed.pixels[[y * 32 + x, 0]];
            }
        }
        let after = extract_patch_features(&changed, &bb, &ps).unwrap();
        for row in 0..16 {
            let same = before.values.row(row) == after.values.row(row);
            assert_eq!(same, row != 4 + 2, "row {row}");
        }
    }

    fn unit_embedder(d_v: usize, d: usize, proj: Array2<f64>) -> (PatchEmbedder, ParamSet<f64>) {
        let mut ps = ParamSet::new();
        let s = ps.insert("image.ln.scale", ParamKind::Norm, Array2::from_elem((1, d_v), 1.0)).unwrap();
        let b = ps.insert("image.ln.bias", ParamKind::Norm, Array2::from_shape_fn((1, d_v), |(_, c)| c as f64 * 0.5)).unwrap();
        let w = ps.insert("image.proj.weight", ParamKind::Weight, proj).unwrap();
        let pb = ps.insert("image.proj.bias", ParamKind::Bias, Array2::zeros((1, d))).unwrap();
        (
            PatchEmbedder { ln: LayerNorm { scale: s, bias: b, eps: PATCH_LN_EPS }, proj: Linear { weight: w, bias: pb, d_in: d_v, d_out: d } },
            ps,
        )
    }

    #[test]
    fn constant_patch_maps_to_ln_bias() {
        let (e, ps) = unit_embedder(3, 3, Array2::eye(3));
        let grid = FeaturePatchGrid { values: Array2::from_elem((2, 3), 7.0), provenance: Provenance::Computed };
        let out = normalize_and_project(&grid, &e, &ps).unwrap();
        for row in out.outer_iter() {
            assert_eq!(row.to_vec(), vec![0.0, 0.5, 1.0]);
        }
    }

    #[test]
    fn normalized_patch_is_fixed_point() {
        let (e, mut ps) = unit_embedder(2, 2, Array2::eye(2));
        ps.value_mut(e.ln.bias).fill(0.0);
        let grid = FeaturePatchGrid { values: ndarray::array![[1.0, -1.0]], provenance: Provenance::Computed };
        let out = normalize_and_project(&grid, &e, &ps).unwrap();
        assert!((out[[0, 0]] - 1.0).abs() < 1e-9 && (out[[0, 1]] + 1.0).abs() < 1e-9);
        let wrong = FeaturePatchGrid { values: Array2::zeros((1, 3)), provenance: Provenance::Computed };
        assert!(normalize_and_project(&wrong, &e, &ps).is_err());
    }

    #[test]
    fn layer_norm_moments_on_paper_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values = Array2::from_shape_simple_fn((64, 2048), || rng.gen_range(-3.0..5.0));
        let mut ps = ParamSet::<f64>::new();
        let mut b = Builder::init(&mut ps, ChaCha8Rng::seed_from_u64(0));
        let ln = LayerNorm::new(&mut b, "ln", 2048).unwrap();
        let mut g = Graph::new(&ps);
        let x = g.constant(values);
        let y = ln.forward(&mut g, x);
        for row in g.value(y).outer_iter() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn projection_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proj = Array2::from_shape_simple_fn((4, 3), || rng.gen_range(-1.0..1.0));
        let (e, ps) = unit_embedder(4, 3, proj);
        let x = Array2::from_shape_simple_fn((1, 4), || rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_simple_fn((1, 4), || rng.gen_range(-1.0..1.0));
        let run = |v: Array2<f64>| {
            let mut g = Graph::new(&ps);
            let i = g.constant(v);
            let o = e.proj.forward(&mut g, i);
            g.value(o).clone()
        };
        let (a, b) = (0.7, -1.3);
        let lhs = run(&x * a + &y * b);
        let rhs = run(x) * a + run(y) * b;
        // bias is zero, so the projection is linear
        assert!((lhs - rhs).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn precomputed_round_trip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values = Array2::from_shape_simple_fn((64, 2048), || rng.gen::<f32>());
        let grid = FeaturePatchGrid { values, provenance: Provenance::Computed };
        let p = dir.path().join("f.mvqt");
        grid.save(&p).unwrap();
        let paper = BackboneConfig { kind: BackboneKind::Precomputed, image_size: 299, grid: 8, feature_dim: 2048, hidden_channels: vec![], trainable: false };
        let back = load_precomputed_features(&p, &paper).unwrap();
        assert_eq!(back.values, grid.values);
        let desk = BackboneConfig { feature_dim: 32, ..paper };
        assert!(matches!(load_precomputed_features(&p, &desk), Err(Error::Shape(_))));
    }

    #[test]
    fn ppm_and_png_load() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(8, 11);
        let ppm = dir.path().join("a.ppm");
        img.save_ppm(&ppm).unwrap();
        let back = Image::load(&ppm, 8).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
        let png = dir.path().join("a.png");
        ::image::RgbImage::from_raw(8, 8, img.to_rgb8()).unwrap().save(&png).unwrap();
        assert_eq!(Image::load(&png, 8).unwrap().to_rgb8(), img.to_rgb8());
        assert_eq!(Image::load(&png, 4).unwrap().size, 4);
    }
}
