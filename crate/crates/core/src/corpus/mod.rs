//! Synthetic remote-sensing scenes, multispectral rendering, grounded
//! question/answer generation, and the on-disk dataset schema.

mod image;
mod io;
mod qa;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use image::ImageTensor;
pub use io::{
    generate_split, read_dataset, write_dataset, DataConfig, Dataset, Example, GeneratedSplit, MANIFEST_FILE,
};
pub use qa::{
    answer_from_scene, generate_qa, lexicon, QaItem, QuestionType, Sample, MAX_COUNT,
};

/// Land-cover classes, in class-id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandCover {
    Water,
    Forest,
    Urban,
    Agriculture,
    Bare,
}

impl LandCover {
    pub const ALL: [LandCover; 5] = [
        LandCover::Water,
        LandCover::Forest,
        LandCover::Urban,
        LandCover::Agriculture,
        LandCover::Bare,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LandCover::Water => "water",
            LandCover::Forest => "forest",
            LandCover::Urban => "urban",
            LandCover::Agriculture => "agriculture",
            LandCover::Bare => "bare",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Mean reflectance in the R, G, B, NIR bands.
    pub fn signature(self) -> [f32; 4] {
        match self {
            LandCover::Water => [0.05, 0.10, 0.20, 0.02],
            LandCover::Forest => [0.05, 0.25, 0.06, 0.60],
            LandCover::Urban => [0.45, 0.42, 0.40, 0.30],
            LandCover::Agriculture => [0.30, 0.45, 0.15, 0.45],
            LandCover::Bare => [0.62, 0.50, 0.35, 0.38],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid: usize,
    /// Relative frequency of each class before smoothing, in class-id order.
    pub class_weights: [f64; 5],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            class_weights: [1.0; 5],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(Error::BadConfig("grid size must be positive".into()));
        }
        if self.class_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.class_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::BadConfig(format!(
                "class weights must be non-negative with a positive sum, got {:?}",
                self.class_weights
            )));
        }
        Ok(())
    }
}

/// A G×G land-cover map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    grid: usize,
    cells: Vec<LandCover>,
    seed: u64,
}

impl Scene {
    pub fn from_cells(grid: usize, cells: Vec<LandCover>, seed: u64) -> Result<Self> {
        if grid == 0 || cells.len() != grid * grid {
            return Err(Error::BadConfig(format!(
                "{} cells do not form a {grid}x{grid} grid",
                cells.len()
            )));
        }
        Ok(Self { grid, cells, seed })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cell(&self, row: usize, col: usize) -> LandCover {
        self.cells[row * self.grid + col]
    }

    pub fn cells(&self) -> &[LandCover] {
        &self.cells
    }

    pub fn histogram(&self) -> [usize; 5] {
        let mut h = [0; 5];
        for c in &self.cells {
            h[c.id()] += 1;
        }
        h
    }

    /// Most frequent class; ties go to the lowest class id.
    pub fn dominant(&self) -> LandCover {
        let h = self.histogram();
        let mut best = 0;
        for (i, &n) in h.iter().enumerate() {
            if n > h[best] {
                best = i;
            }
        }
        LandCover::ALL[best]
    }
}

/// Draws every cell from the class weights, then runs one smoothing pass in
/// which each cell copies a uniformly chosen 4-neighbour with probability 0.5.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let g = config.grid;
    let mut rng = rng::stream(seed, "scene");
    let dist = WeightedIndex::new(config.class_weights)
        .map_err(|e| Error::BadConfig(format!("class weights: {e}")))?;
    let drawn: Vec<LandCover> = (0..g * g)
        .map(|_| LandCover::ALL[dist.sample(&mut rng)])
        .collect();

    let mut cells = drawn.clone();
    for r in 0..g {
        for c in 0..g {
            if !rng.random_bool(0.5) {
                continue;
            }
            let mut neighbours = Vec::with_capacity(4);
            if r > 0 {
                neighbours.push((r - 1, c));
            }
            if r + 1 < g {
                neighbours.push((r + 1, c));
            }
            if c > 0 {
                neighbours.push((r, c - 1));
            }
            if c + 1 < g {
                neighbours.push((r, c + 1));
            }
            if neighbours.is_empty() {
                continue;
            }
            let (nr, nc) = neighbours[rng.random_range(0..neighbours.len())];
            cells[r * g + c] = drawn[nr * g + nc];
        }
    }
    Ok(Scene { grid: g, cells, seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for ImageDims {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 4,
        }
    }
}

/// Expands each cell into a block of pixels carrying its class signature,
/// adds N(0, noise_sigma²) noise per value and clamps to [0, 1].
pub fn render_image(scene: &Scene, dims: ImageDims, noise_sigma: f32, seed: u64) -> Result<ImageTensor> {
    let g = scene.grid();
    if !dims.height.is_multiple_of(g) || !dims.width.is_multiple_of(g) {
        return Err(Error::BadConfig(format!(
            "image {}x{} is not divisible into a {g}x{g} grid",
            dims.height, dims.width
        )));
    }
    if !(3..=4).contains(&dims.channels) {
        return Err(Error::BadConfig(format!(
            "channels must be 3 (RGB) or 4 (RGB+NIR), got {}",
            dims.channels
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::BadConfig(format!("noise sigma {noise_sigma}")));
    }
    let (bh, bw) = (dims.height / g, dims.width / g);
    let mut rng = rng::stream(seed, "render");
    let noise = Normal::new(0.0f32, noise_sigma).expect("sigma validated");
    let mut data = Vec::with_capacity(dims.height * dims.width * dims.channels);
    for y in 0..dims.height {
        for x in 0..dims.width {
            let sig = scene.cell(y / bh, x / bw).signature();
            for &s in &sig[..dims.channels] {
                let v = if noise_sigma > 0.0 {
                    s + noise.sample(&mut rng)
                } else {
                    s
                };
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::new(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(3, &cfg).unwrap(), generate_scene(3, &cfg).unwrap());
        assert_ne!(
            generate_scene(3, &cfg).unwrap().cells(),
            generate_scene(4, &cfg).unwrap().cells()
        );
    }

    #[test]
    fn degenerate_weights_give_uniform_scene() {
        let cfg = SceneConfig {
            grid: 8,
            class_weights: [1.0, 0.0, 0.0, 0.0, 0.0],
        };
        let s = generate_scene(11, &cfg).unwrap();
        assert!(s.cells().iter().all(|&c| c == LandCover::Water));
    }

    #[test]
    fn bad_weights_rejected() {
        let mut cfg = SceneConfig {
            class_weights: [0.0; 5],
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(1, &cfg), Err(Error::BadConfig(_))));
        cfg.class_weights = [1.0, -1.0, 1.0, 1.0, 1.0];
        assert!(matches!(generate_scene(1, &cfg), Err(Error::BadConfig(_))));
    }

    #[test]
    fn dominant_ties_go_to_lowest_id() {
        let cells = vec![LandCover::Urban, LandCover::Forest, LandCover::Urban, LandCover::Forest];
        let s = Scene::from_cells(2, cells, 0).unwrap();
        assert_eq!(s.dominant(), LandCover::Forest);
    }

    #[test]
    fn zero_noise_renders_signatures() {
        let s = generate_scene(5, &SceneConfig::default()).unwrap();
        let img = render_image(&s, ImageDims::default(), 0.0, 1).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let sig = s.cell(y / 4, x / 4).signature();
                assert_eq!(img.pixel(y, x), &sig[..]);
            }
        }
    }

    #[test]
    fn values_clamped_for_large_noise() {
        let s = generate_scene(5, &SceneConfig::default()).unwrap();
        let img = render_image(&s, ImageDims::default(), 5.0, 1).unwrap();
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn render_rejects_indivisible_dims() {
        let s = generate_scene(5, &SceneConfig::default()).unwrap();
        let dims = ImageDims {
            height: 30,
            width: 32,
            channels: 4,
        };
        assert!(render_image(&s, dims, 0.0, 0).is_err());
    }
}
