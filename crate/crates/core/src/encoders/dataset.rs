//! Deterministic synthetic concepts: a class-determined shape, a palette and
//! a texture, rendered on a light background with varied pose.

use std::fs;
use std::path::Path;

use mbtensor::{RngStream, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{Image, CHANNELS, IMAGE_SIZE};
use super::vocab::{Vocabulary, CLASS_NOUNS, PALETTE_WORDS, TEXTURE_WORDS};
use crate::{Error, Result};

pub const MAX_IMAGES: usize = 5;
/// Stripe and check period in pixels; a multiple of the latent patch.
pub const TEXTURE_PERIOD: usize = 8;
const SECONDARY_SHADE: f32 = 0.55;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Triangle,
    Square,
    Diamond,
    Cross,
}

impl Shape {
    pub fn for_noun(noun: &str) -> Option<Shape> {
        Some(match noun {
            "dog" => Shape::Disk,
            "cat" => Shape::Triangle,
            "cup" => Shape::Square,
            "vase" => Shape::Diamond,
            "backpack" => Shape::Cross,
            _ => return None,
        })
    }

    /// Membership of offset `(dx, dy)` for an object of radius `r`.
    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => ax.max(ay) <= 0.85 * r,
            Shape::Diamond => ax + ay <= 1.15 * r,
            Shape::Cross => (ax <= 0.38 * r && ay <= r) || (ay <= 0.38 * r && ax <= r),
            Shape::Triangle => {
                let top = -r;
                let bottom = 0.8 * r;
                dy >= top && dy <= bottom && ax <= (dy - top) / (bottom - top) * r
            }
        }
    }
}

pub fn palette_rgb(name: &str) -> Option<[f32; 3]> {
    Some(match name {
        "red" => [0.85, 0.15, 0.15],
        "blue" => [0.15, 0.3, 0.85],
        "green" => [0.15, 0.7, 0.2],
        "yellow" => [0.9, 0.8, 0.1],
        "purple" => [0.55, 0.2, 0.75],
        "orange" => [0.95, 0.5, 0.1],
        "pink" => [0.95, 0.45, 0.7],
        "cyan" => [0.1, 0.8, 0.85],
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub shape: Shape,
    pub palette: String,
    pub texture: String,
    pub texture_seed: u64,
}

impl GeneratorParams {
    pub fn for_attributes(class_noun: &str, palette: &str, texture: &str, texture_seed: u64) -> Result<Self> {
        let shape = Shape::for_noun(class_noun).ok_or_else(|| Error::Dataset(format!("no shape for class noun {class_noun:?}")))?;
        if palette_rgb(palette).is_none() {
            return Err(Error::Dataset(format!("unknown palette {palette:?}")));
        }
        if !TEXTURE_WORDS.contains(&texture) {
            return Err(Error::Dataset(format!("unknown texture {texture:?}")));
        }
        Ok(Self {
            shape,
            palette: palette.to_string(),
            texture: texture.to_string(),
            texture_seed,
        })
    }
}

/// Placement and background of one rendering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
    pub background: [f32; 3],
}

impl Pose {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let c = IMAGE_SIZE as f32 / 2.0;
        let gray: f32 = rng.random_range(0.72..0.78);
        let mut background = [gray; 3];
        for b in &mut background {
            *b = (*b + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
        }
        Self {
            cx: c + rng.random_range(-4.0..=4.0),
            cy: c + rng.random_range(-4.0..=4.0),
            radius: rng.random_range(9.0..=12.0),
            background,
        }
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders one image; values are quantized to 8 bits so that PNG storage is
/// lossless.
pub fn render(params: &GeneratorParams, pose: &Pose) -> Image {
    let primary = palette_rgb(&params.palette).expect("validated palette");
    let secondary = primary.map(|v| v * SECONDARY_SHADE);
    let phase = (params.texture_seed % 2) as usize;
    let half = TEXTURE_PERIOD / 2;
    Tensor::from_fn([IMAGE_SIZE, IMAGE_SIZE, CHANNELS], |i| {
        let c = i % CHANNELS;
        let x = (i / CHANNELS) % IMAGE_SIZE;
        let y = i / (CHANNELS * IMAGE_SIZE);
        let (dx, dy) = (x as f32 + 0.5 - pose.cx, y as f32 + 0.5 - pose.cy);
        let v = if params.shape.contains(dx, dy, pose.radius) {
            let alt = match params.texture.as_str() {
                "striped" => (y / half + phase) % 2 == 1,
                "checkered" => (x / half + y / half + phase) % 2 == 1,
                _ => false,
            };
            if alt {
                secondary[c]
            } else {
                primary[c]
            }
        } else {
            pose.background[c]
        };
        quantize(v)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptMeta {
    pub concept_id: String,
    pub class_noun: String,
    pub params: GeneratorParams,
    pub num_images: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConcept {
    pub concept_id: String,
    pub class_noun: String,
    pub params: GeneratorParams,
    pub images: Vec<Image>,
}

impl SyntheticConcept {
    pub fn meta(&self) -> ConceptMeta {
        ConceptMeta {
            concept_id: self.concept_id.clone(),
            class_noun: self.class_noun.clone(),
            params: self.params.clone(),
            num_images: self.images.len(),
        }
    }

    /// Renders `m` poses of fixed attributes, drawing poses from `stream`.
    pub fn render_new(concept_id: &str, class_noun: &str, params: GeneratorParams, m: usize, stream: &RngStream) -> Result<Self> {
        check_count(m)?;
        let images = (0..m)
            .map(|i| render(&params, &Pose::sample(&mut stream.split_index("pose", i as u64).rng())))
            .collect();
        Ok(Self {
            concept_id: concept_id.to_string(),
            class_noun: class_noun.to_string(),
            params,
            images,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::to_string_pretty(&self.meta()).expect("meta serializes");
        let p = dir.join("meta.json");
        fs::write(&p, meta).map_err(|e| Error::io(&p, e))?;
        for (i, img) in self.images.iter().enumerate() {
            save_png(img, &dir.join(format!("img_{i}.png")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("meta.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: ConceptMeta = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?;
        check_count(meta.num_images)?;
        let images = (0..meta.num_images)
            .map(|i| load_png(&dir.join(format!("img_{i}.png"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            concept_id: meta.concept_id,
            class_noun: meta.class_noun,
            params: meta.params,
            images,
        })
    }
}

fn check_count(m: usize) -> Result<()> {
    if !(1..=MAX_IMAGES).contains(&m) {
        return Err(Error::Dataset(format!("M must be in 1..={MAX_IMAGES}, got {m}")));
    }
    Ok(())
}

/// Generates `num_concepts` concepts with distinct attribute triples. Class
/// nouns are drawn from a small fixed set, so any six concepts share one.
pub fn generate_dataset(seed: u64, num_concepts: usize, m: usize) -> Result<Vec<SyntheticConcept>> {
    check_count(m)?;
    let combos = CLASS_NOUNS.len() * PALETTE_WORDS.len() * TEXTURE_WORDS.len();
    if num_concepts == 0 || num_concepts > combos {
        return Err(Error::Dataset(format!("num_concepts must be in 1..={combos}, got {num_concepts}")));
    }
    let stream = RngStream::new(seed).split("dataset");
    let mut rng = stream.split("attributes").rng();
    let mut taken: Vec<(usize, usize, usize)> = Vec::new();
    let mut out = Vec::with_capacity(num_concepts);
    for i in 0..num_concepts {
        let triple = loop {
            let t = (
                rng.random_range(0..CLASS_NOUNS.len()),
                rng.random_range(0..PALETTE_WORDS.len()),
                rng.random_range(0..TEXTURE_WORDS.len()),
            );
            if !taken.contains(&t) {
                break t;
            }
        };
        taken.push(triple);
        let noun = CLASS_NOUNS[triple.0];
        let params = GeneratorParams::for_attributes(noun, PALETTE_WORDS[triple.1], TEXTURE_WORDS[triple.2], rng.random())?;
        let id = format!("concept_{i:02}");
        out.push(SyntheticConcept::render_new(&id, noun, params, m, &stream.split(&id))?);
    }
    Ok(out)
}

/// Writes `concepts/<id>/…` plus the vocabulary under `root`.
pub fn write_dataset(root: &Path, concepts: &[SyntheticConcept], vocab: &Vocabulary) -> Result<()> {
    for c in concepts {
        c.save(&root.join("concepts").join(&c.concept_id))?;
    }
    vocab.save(&root.join("vocab.bin"))
}

/// One pretraining sample: a random attribute rendering and its caption.
#[derive(Clone, Debug)]
pub struct CaptionedImage {
    pub image: Image,
    pub caption: String,
}

const CONTEXTS: [&str; 6] = [
    "on the beach",
    "in the snow",
    "on the table",
    "in the room",
    "in the garden",
    "on the grass",
];

/// Draws a random object and a caption naming its attributes, using the
/// same templates as concept training so placeholders appear in familiar
/// positions.
pub fn sample_captioned(rng: &mut impl Rng) -> CaptionedImage {
    let noun = CLASS_NOUNS[rng.random_range(0..CLASS_NOUNS.len())];
    let palette = PALETTE_WORDS[rng.random_range(0..PALETTE_WORDS.len())];
    let texture = TEXTURE_WORDS[rng.random_range(0..TEXTURE_WORDS.len())];
    let params = GeneratorParams::for_attributes(noun, palette, texture, rng.random()).expect("known attributes");
    let image = render(&params, &Pose::sample(rng));
    let template = super::vocab::TEMPLATES[rng.random_range(0..super::vocab::TEMPLATES.len())];
    let mut phrase = String::new();
    // Attribute words are sometimes dropped so the model also learns from
    // partial descriptions.
    if rng.random_bool(0.9) {
        phrase.push_str(palette);
        phrase.push(' ');
    }
    if rng.random_bool(0.8) {
        phrase.push_str(texture);
        phrase.push(' ');
    }
    phrase.push_str(noun);
    let mut caption = template.replace("{}", &phrase);
    if rng.random_bool(0.2) {
        caption.push(' ');
        caption.push_str(CONTEXTS[rng.random_range(0..CONTEXTS.len())]);
    }
    CaptionedImage { image, caption }
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[2] != CHANNELS {
        return Err(Error::Image(format!("cannot save {s:?} as RGB")));
    }
    let bytes: Vec<u8> = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    image::save_buffer(path, &bytes, s[1] as u32, s[0] as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(Tensor::new([h as usize, w as usize, CHANNELS], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_counted() {
        let a = generate_dataset(7, 2, 4).unwrap();
        assert_eq!(a, generate_dataset(7, 2, 4).unwrap());
        assert_eq!(a.iter().map(|c| c.images.len()).sum::<usize>(), 8);
        assert_ne!(a, generate_dataset(8, 2, 4).unwrap());
    }

    #[test]
    fn rejects_bad_counts() {
        assert!(matches!(generate_dataset(1, 2, 6), Err(Error::Dataset(_))));
        assert!(matches!(generate_dataset(1, 2, 0), Err(Error::Dataset(_))));
        assert!(matches!(generate_dataset(1, 0, 3), Err(Error::Dataset(_))));
    }

    #[test]
    fn six_concepts_share_a_class_noun() {
        for seed in 0..20 {
            let d = generate_dataset(seed, 6, 1).unwrap();
            let mut nouns: Vec<_> = d.iter().map(|c| c.class_noun.clone()).collect();
            nouns.sort();
            nouns.dedup();
            assert!(nouns.len() < 6);
        }
    }

    #[test]
    fn images_are_in_unit_range_and_show_object() {
        let d = generate_dataset(3, 3, 5).unwrap();
        for c in &d {
            let rgb = palette_rgb(&c.params.palette).unwrap();
            for img in &c.images {
                assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
                let hits = img
                    .data()
                    .chunks(3)
                    .filter(|p| (p[0] - quantize(rgb[0])).abs() < 1e-6 && (p[1] - quantize(rgb[1])).abs() < 1e-6)
                    .count();
                assert!(hits > 30, "{} shows {hits} object pixels", c.concept_id);
            }
        }
    }

    #[test]
    fn png_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(11, 2, 3).unwrap();
        write_dataset(dir.path(), &d, &Vocabulary::standard()).unwrap();
        for c in &d {
            let back = SyntheticConcept::load(&dir.path().join("concepts").join(&c.concept_id)).unwrap();
            assert_eq!(&back, c);
        }
        assert!(dir.path().join("vocab.bin").exists());
    }

    #[test]
    fn captions_are_encodable() {
        let vocab = Vocabulary::standard();
        let mut rng = RngStream::new(5).rng();
        for _ in 0..200 {
            let s = sample_captioned(&mut rng);
            vocab.encode_prompt(&s.caption, &Default::default()).unwrap();
        }
    }
}
