use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{generate_qa, generate_scene, render_image, ImageDims, ImageTensor, QuestionType, Sample, SceneConfig};
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_FILE: &str = "samples.jsonl";
const REQUIRED: [&str; 5] = ["id", "image_path", "question", "question_type", "answer"];

/// Everything that determines a generated split besides its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub image: ImageDims,
    pub noise_sigma: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            image: ImageDims::default(),
            noise_sigma: 0.02,
        }
    }
}

/// A sample paired with its decoded image.
#[derive(Clone, Debug)]
pub struct Example {
    pub sample: Sample,
    pub image: Arc<ImageTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSplit {
    pub samples: Vec<Sample>,
    /// (relative path, image) for every distinct image referenced by `samples`.
    pub images: Vec<(String, ImageTensor)>,
}

impl GeneratedSplit {
    pub fn examples(&self) -> Vec<Example> {
        let by_path: HashMap<&str, Arc<ImageTensor>> = self
            .images
            .iter()
            .map(|(p, img)| (p.as_str(), Arc::new(img.clone())))
            .collect();
        self.samples
            .iter()
            .map(|s| Example {
                sample: s.clone(),
                image: by_path[s.image_path.as_str()].clone(),
            })
            .collect()
    }
}

/// Generates scenes until `n_samples` questions exist (the last scene's
/// questions are truncated). Sample ids are `<name>-<scene>-<question>`.
pub fn generate_split(name: &str, n_samples: usize, seed: u64, config: &DataConfig) -> Result<GeneratedSplit> {
    config.scene.validate()?;
    let mut qa_rng = rng::stream(seed, "qa");
    let mut samples = Vec::with_capacity(n_samples);
    let mut images = Vec::new();
    let mut scene_idx = 0usize;
    while samples.len() < n_samples {
        let scene = generate_scene(rng::derive_seed(seed, &format!("scene/{scene_idx}")), &config.scene)?;
        let image = render_image(
            &scene,
            config.image,
            config.noise_sigma,
            rng::derive_seed(seed, &format!("render/{scene_idx}")),
        )?;
        let path = format!("images/{name}-{scene_idx:05}.rsvt");
        for (q, qa) in generate_qa(&scene, &mut qa_rng).into_iter().enumerate() {
            if samples.len() == n_samples {
                break;
            }
            samples.push(Sample::from_qa(format!("{name}-{scene_idx:05}-{q}"), path.clone(), qa));
        }
        images.push((path, image));
        scene_idx += 1;
    }
    Ok(GeneratedSplit { samples, images })
}

fn validate_sample(s: &Sample, location: &str) -> Result<()> {
    match (&s.question_type, &s.choices) {
        (QuestionType::Mc, None) => Err(Error::schema(location, "multiple-choice sample without choices")),
        (QuestionType::Mc, Some(c)) if c.is_empty() => Err(Error::schema(location, "empty choices")),
        (QuestionType::Mc, Some(c)) if !c.contains(&s.answer) => Err(Error::schema(
            location,
            format!("answer {:?} is not among the choices", s.answer),
        )),
        (QuestionType::Yesno | QuestionType::Open, Some(_)) => Err(Error::schema(
            location,
            format!("choices given for a {} sample", s.question_type.as_str()),
        )),
        _ if s.image_path.is_empty() || Path::new(&s.image_path).is_absolute() => Err(Error::schema(
            location,
            format!("image_path must be relative, got {:?}", s.image_path),
        )),
        _ => Ok(()),
    }
}

/// Writes `samples.jsonl` and every image file under `dir`.
pub fn write_dataset(samples: &[Sample], images: &[(String, ImageTensor)], dir: &Path) -> Result<PathBuf> {
    for s in samples {
        validate_sample(s, &format!("sample {}", s.id))?;
    }
    for (rel, img) in images {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        img.save(&path)?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s).expect("sample serializes");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn image_file(&self, sample: &Sample) -> PathBuf {
        self.dir.join(&sample.image_path)
    }

    pub fn load_image(&self, sample: &Sample) -> Result<ImageTensor> {
        ImageTensor::load(&self.image_file(sample))
    }

    /// Loads every referenced image once and pairs it with its samples.
    pub fn examples(&self) -> Result<Vec<Example>> {
        let mut cache: HashMap<&str, Arc<ImageTensor>> = HashMap::new();
        let mut out = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let image = match cache.get(s.image_path.as_str()) {
                Some(img) => img.clone(),
                None => {
                    let img = Arc::new(self.load_image(s)?);
                    cache.insert(&s.image_path, img.clone());
                    img
                }
            };
            out.push(Example {
                sample: s.clone(),
                image,
            });
        }
        Ok(out)
    }
}

/// Parses and validates `dir/samples.jsonl`. Images are loaded lazily.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{}:{}", manifest.display(), n + 1);
        let value: Value = serde_json::from_str(line).map_err(|e| Error::schema(&location, e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::schema(&location, "line is not a JSON object"))?;
        for field in REQUIRED {
            if !obj.contains_key(field) {
                return Err(Error::schema(&location, format!("missing field \"{field}\"")));
            }
        }
        let sample: Sample = serde_json::from_value(value).map_err(|e| Error::schema(&location, e.to_string()))?;
        validate_sample(&sample, &location)?;
        samples.push(sample);
    }
    Ok(Dataset {
        dir: dir.to_path_buf(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_has_requested_size_and_unique_ids() {
        let split = generate_split("train", 13, 5, &DataConfig::default()).unwrap();
        assert_eq!(split.samples.len(), 13);
        assert_eq!(split.images.len(), 3);
        let mut ids: Vec<_> = split.samples.iter().map(|s| &s.id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 13);
    }

    #[test]
    fn mc_answer_outside_choices_rejected() {
        let s = Sample {
            id: "a".into(),
            image_path: "images/a.rsvt".into(),
            question: "q".into(),
            question_type: QuestionType::Mc,
            choices: Some(vec!["water".into()]),
            answer: "forest".into(),
        };
        assert!(matches!(validate_sample(&s, "x"), Err(Error::Schema { .. })));
    }
}
