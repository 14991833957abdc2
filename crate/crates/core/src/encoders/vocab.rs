//! Frozen word-embedding table standing in for the text encoder.

use std::collections::BTreeMap;
use std::path::Path;

use mbtensor::{rng::normal, Graph, RngStream, Tensor, Var};
use rand::Rng;

use crate::container::Container;
use crate::{Error, Result};

/// Embedding width shared by every word, placeholder and query token.
pub const EMBED_DIM: usize = 64;
/// Maximum prompt length; prompts are padded to it.
pub const MAX_PROMPT_LEN: usize = 16;
/// Seed of the shipped table.
pub const VOCAB_SEED: u64 = 0x4d42_5643;

pub const NORM_RANGE: (f64, f64) = (0.30, 0.40);

pub const CLASS_NOUNS: [&str; 5] = ["dog", "cat", "cup", "vase", "backpack"];
pub const PALETTE_WORDS: [&str; 8] = ["red", "blue", "green", "yellow", "purple", "orange", "pink", "cyan"];
pub const TEXTURE_WORDS: [&str; 3] = ["plain", "striped", "checkered"];

/// Prompt templates in the style of the CLIP ImageNet set. `{}` is replaced
/// by the concept phrase, e.g. `S* dog`.
pub const TEMPLATES: [&str; 8] = [
    "a photo of a {}",
    "a rendering of a {}",
    "a cropped photo of the {}",
    "the photo of a {}",
    "a photo of a clean {}",
    "a close-up photo of a {}",
    "a bright photo of the {}",
    "a good photo of a {}",
];

const FILLER: &[&str] = &[
    "a",
    "an",
    "the",
    "photo",
    "of",
    "rendering",
    "cropped",
    "clean",
    "close-up",
    "bright",
    "good",
    "picture",
    "image",
    "painting",
    "drawing",
    "sketch",
    "watercolor",
    "oil",
    "pencil",
    "cartoon",
    "style",
    "art",
    "render",
    "dark",
    "small",
    "large",
    "big",
    "tiny",
    "nice",
    "weird",
    "cool",
    "beautiful",
    "pretty",
    "old",
    "new",
    "on",
    "in",
    "at",
    "with",
    "and",
    "next",
    "to",
    "near",
    "under",
    "above",
    "behind",
    "front",
    "top",
    "side",
    "beach",
    "jungle",
    "snow",
    "street",
    "city",
    "forest",
    "desert",
    "room",
    "table",
    "grass",
    "floor",
    "garden",
    "park",
    "mountain",
    "river",
    "lake",
    "sea",
    "sky",
    "night",
    "day",
    "sunset",
    "sunrise",
    "rain",
    "fog",
    "autumn",
    "winter",
    "summer",
    "spring",
    "wooden",
    "marble",
    "stone",
    "metal",
    "glass",
    "paper",
    "plastic",
    "leather",
    "golden",
    "silver",
    "white",
    "black",
    "gray",
    "brown",
    "wearing",
    "hat",
    "scarf",
    "sunglasses",
    "sitting",
    "standing",
    "lying",
    "running",
    "sleeping",
    "playing",
    "floating",
    "is",
    "are",
    "by",
    "from",
    "for",
    "one",
    "two",
    "three",
    "pair",
    "group",
    "scene",
    "view",
    "portrait",
    "landscape",
    "closeup",
    "shot",
    "lighting",
    "soft",
    "studio",
    "background",
    "blurry",
    "sharp",
    "detailed",
    "simple",
    "low",
    "high",
    "resolution",
    "quality",
    "pixel",
    "toy",
    "plush",
    "bowl",
    "chair",
    "sofa",
    "bed",
    "car",
    "bike",
    "boat",
    "tree",
    "flower",
    "house",
    "castle",
    "bridge",
    "tower",
    "road",
    "window",
    "door",
    "wall",
    "shelf",
    "box",
    "bag",
    "sneaker",
    "teapot",
    "clock",
    "lamp",
    "book",
    "bottle",
    "mug",
    "teddybear",
    "robot",
    "bird",
    "fish",
    "rabbit",
    "horse",
    "duck",
    "bear",
    "lion",
    "tiger",
    "monkey",
    "panda",
    "made",
    "like",
    "into",
    "style",
    "vibrant",
    "pastel",
    "neon",
    "moody",
    "cozy",
    "sunny",
    "cloudy",
    "misty",
    "rainy",
    "snowy",
    "famous",
    "vintage",
    "modern",
    "classic",
    "empty",
];

/// Ordered word list: class nouns, palette, textures, then filler.
fn word_list() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    for w in CLASS_NOUNS.iter().chain(&PALETTE_WORDS).chain(&TEXTURE_WORDS).chain(FILLER) {
        if !words.contains(w) {
            words.push(w);
        }
    }
    words
}

/// Placeholder tokens end in `*` (`S*`, `V*`, ...).
pub fn is_placeholder(word: &str) -> bool {
    word.len() >= 2 && word.ends_with('*') && !word[..word.len() - 1].contains('*')
}

/// Splits a prompt on whitespace.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt.split_whitespace().map(str::to_string).collect()
}

/// Fills a template with `"{placeholder} {class_noun}"`.
pub fn fill_template(template: &str, placeholder: &str, class_noun: &str) -> String {
    template.replace("{}", &format!("{placeholder} {class_noun}"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    seed: u64,
    dim: usize,
    words: Vec<String>,
    index: BTreeMap<String, usize>,
    table: Tensor<f32>,
}

/// Prompt embedding padded to [`MAX_PROMPT_LEN`] rows. Padding rows are the
/// zero vector, so summing with an empty prompt is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Tensor<f32>,
    pub mask: Vec<bool>,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All-padding embedding (the null prompt).
    pub fn null(dim: usize) -> Self {
        Self {
            tokens: Tensor::zeros([MAX_PROMPT_LEN, dim]),
            mask: vec![false; MAX_PROMPT_LEN],
        }
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.tokens.data()[i * d..(i + 1) * d]
    }
}

enum Slot<'a> {
    Word(usize),
    Bound(&'a str),
    Pad,
}

impl Vocabulary {
    /// The shipped table.
    pub fn standard() -> Self {
        Self::generate(VOCAB_SEED)
    }

    /// Gaussian embeddings rescaled to a norm drawn uniformly from
    /// [`NORM_RANGE`].
    pub fn generate(seed: u64) -> Self {
        Self::generate_with_dim(seed, EMBED_DIM)
    }

    /// Same word list at another width; used by miniature test models.
    pub fn generate_with_dim(seed: u64, dim: usize) -> Self {
        let words: Vec<String> = word_list().into_iter().map(str::to_string).collect();
        let stream = RngStream::new(seed).split("vocabulary");
        let mut data = Vec::with_capacity(words.len() * dim);
        for (i, _) in words.iter().enumerate() {
            let mut rng = stream.split_index("word", i as u64).rng();
            let raw = normal::<f64>(&mut rng, [dim], 1.0);
            let target = rng.random_range(NORM_RANGE.0..NORM_RANGE.1);
            let scale = target / raw.l2_norm();
            data.extend(raw.data().iter().map(|&v| (v * scale) as f32));
        }
        let table = Tensor::new([words.len(), dim], data).expect("table shape");
        Self::from_parts(seed, words, table)
    }

    fn from_parts(seed: u64, words: Vec<String>, table: Tensor<f32>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self {
            seed,
            dim: table.shape()[1],
            words,
            index,
            table,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn table(&self) -> &Tensor<f32> {
        &self.table
    }

    pub fn embedding(&self, word: &str) -> Result<&[f32]> {
        let i = *self.index.get(word).ok_or_else(|| Error::UnknownWord(word.to_string()))?;
        Ok(&self.table.data()[i * self.dim..(i + 1) * self.dim])
    }

    /// L2 norm of a word's embedding, accumulated in `f64`.
    pub fn norm(&self, word: &str) -> Result<f64> {
        Ok(self.embedding(word)?.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
    }

    fn resolve<'a, V>(&self, words: &'a [String], bound: impl Fn(&str) -> Option<V>) -> Result<Vec<Slot<'a>>> {
        if words.len() > MAX_PROMPT_LEN {
            return Err(Error::PromptTooLong {
                len: words.len(),
                max: MAX_PROMPT_LEN,
            });
        }
        let mut slots = Vec::with_capacity(MAX_PROMPT_LEN);
        for w in words {
            if let Some(&i) = self.index.get(w.as_str()) {
                slots.push(Slot::Word(i));
            } else if bound(w).is_some() {
                slots.push(Slot::Bound(w));
            } else if is_placeholder(w) {
                return Err(Error::UnboundPlaceholder(w.clone()));
            } else {
                return Err(Error::UnknownWord(w.clone()));
            }
        }
        while slots.len() < MAX_PROMPT_LEN {
            slots.push(Slot::Pad);
        }
        Ok(slots)
    }

    /// Looks up each word; placeholders take their bound embedding.
    pub fn encode_text(&self, words: &[String], bindings: &BTreeMap<String, Tensor<f32>>) -> Result<PromptEmbedding> {
        let slots = self.resolve(words, |w| bindings.get(w))?;
        let mut data = Vec::with_capacity(MAX_PROMPT_LEN * self.dim);
        let mut mask = Vec::with_capacity(MAX_PROMPT_LEN);
        for slot in &slots {
            match slot {
                Slot::Word(i) => data.extend_from_slice(&self.table.data()[i * self.dim..(i + 1) * self.dim]),
                Slot::Bound(w) => {
                    let v = &bindings[*w];
                    if v.numel() != self.dim {
                        return Err(Error::Config(format!(
                            "binding for {w:?} has {} elements, expected {}",
                            v.numel(),
                            self.dim
                        )));
                    }
                    data.extend_from_slice(v.data());
                }
                Slot::Pad => data.extend(std::iter::repeat_n(0.0, self.dim)),
            }
            mask.push(!matches!(slot, Slot::Pad));
        }
        Ok(PromptEmbedding {
            tokens: Tensor::new([MAX_PROMPT_LEN, self.dim], data)?,
            mask,
        })
    }

    pub fn encode_prompt(&self, prompt: &str, bindings: &BTreeMap<String, Tensor<f32>>) -> Result<PromptEmbedding> {
        self.encode_text(&tokenize(prompt), bindings)
    }

    /// Graph version of [`encode_text`](Self::encode_text): placeholder rows
    /// are graph values (e.g. a differentiable customized embedding of shape
    /// `[d]` or `[1, d]`), everything else is constant.
    pub fn encode_text_var<T: mbtensor::Float>(&self, g: &mut Graph<T>, words: &[String], bindings: &BTreeMap<String, Var>) -> Result<Var> {
        let slots = self.resolve(words, |w| bindings.get(w))?;
        let mut parts: Vec<Var> = Vec::new();
        let mut pending: Vec<T> = Vec::new();
        let flush = |g: &mut Graph<T>, pending: &mut Vec<T>, parts: &mut Vec<Var>| -> Result<()> {
            if !pending.is_empty() {
                let rows = pending.len() / self.dim;
                let t = Tensor::new([rows, self.dim], std::mem::take(pending))?;
                parts.push(g.constant(t));
            }
            Ok(())
        };
        for slot in &slots {
            match slot {
                Slot::Word(i) => pending.extend(self.table.data()[i * self.dim..(i + 1) * self.dim].iter().map(|&v| T::of(v as f64))),
                Slot::Pad => pending.extend(std::iter::repeat_n(T::zero(), self.dim)),
                Slot::Bound(w) => {
                    flush(g, &mut pending, &mut parts)?;
                    let v = bindings[*w];
                    if g.value(v).numel() != self.dim {
                        return Err(Error::Config(format!("binding for {w:?} has shape {:?}", g.shape(v))));
                    }
                    let row = g.reshape(v, &[1, self.dim])?;
                    parts.push(row);
                }
            }
        }
        flush(g, &mut pending, &mut parts)?;
        Ok(g.concat(&parts, 0)?)
    }

    const MAGIC: [u8; 4] = *b"MBVC";
    const VERSION: u32 = 1;

    pub fn to_container(&self) -> Container {
        Container {
            magic: Self::MAGIC,
            version: Self::VERSION,
            metadata: serde_json::json!({ "seed": self.seed, "dim": self.dim, "words": self.words }),
            tensors: vec![("embeddings".into(), self.table.clone())],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, Self::MAGIC, Self::VERSION, "vocabulary")?;
        let seed = c.metadata["seed"].as_u64().ok_or_else(|| Error::Parse("vocabulary seed".into()))?;
        let words: Vec<String> =
            serde_json::from_value(c.metadata["words"].clone()).map_err(|e| Error::Parse(format!("vocabulary words: {e}")))?;
        let table = c.tensor("embeddings")?.clone();
        if table.shape().len() != 2 || table.shape()[0] != words.len() {
            return Err(Error::validation(
                "vocabulary table shape",
                format!("{:?} for {} words", table.shape(), words.len()),
            ));
        }
        Ok(Self::from_parts(seed, words, table))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bound(name: &str, value: f32) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([(name.to_string(), Tensor::full([EMBED_DIM], value))])
    }

    #[test]
    fn vocabulary_has_about_two_hundred_words_in_norm_regime() {
        let v = Vocabulary::standard();
        assert!(v.words().len() >= 190, "{}", v.words().len());
        for w in v.words() {
            let n = v.norm(w).unwrap();
            assert!((NORM_RANGE.0..=NORM_RANGE.1).contains(&n), "{w}: {n}");
        }
        assert_eq!(Vocabulary::standard(), v);
    }

    #[test]
    fn encode_text_resolves_placeholder() {
        let v = Vocabulary::standard();
        let b = bound("S*", 0.25);
        let e = v.encode_prompt("a photo of a S* dog", &b).unwrap();
        assert_eq!(e.len(), 6);
        assert_eq!(e.row(4), b["S*"].data());
        assert_eq!(e.row(5), v.embedding("dog").unwrap());
        assert!(e.row(6).iter().all(|&x| x == 0.0));
        assert_eq!(e, v.encode_prompt("a photo of a S* dog", &b).unwrap());
    }

    #[test]
    fn empty_prompt_is_all_padding() {
        let v = Vocabulary::standard();
        let e = v.encode_prompt("", &BTreeMap::new()).unwrap();
        assert_eq!(e, PromptEmbedding::null(EMBED_DIM));
    }

    #[test]
    fn encode_text_errors() {
        let v = Vocabulary::standard();
        assert!(matches!(
            v.encode_prompt("a photo of a zebra", &BTreeMap::new()),
            Err(Error::UnknownWord(w)) if w == "zebra"
        ));
        assert!(matches!(
            v.encode_prompt("a photo of a S* dog", &BTreeMap::new()),
            Err(Error::UnboundPlaceholder(w)) if w == "S*"
        ));
        let long = vec!["a"; MAX_PROMPT_LEN + 1].join(" ");
        assert!(matches!(v.encode_prompt(&long, &BTreeMap::new()), Err(Error::PromptTooLong { .. })));
    }

    #[test]
    fn graph_encoding_matches_eager() {
        let v = Vocabulary::standard();
        let b = bound("V*", -0.5);
        let eager = v.encode_prompt("a V* cat on the beach", &b).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.constant(b["V*"].clone());
        let bindings = BTreeMap::from([("V*".to_string(), x)]);
        let var = v.encode_text_var(&mut g, &tokenize("a V* cat on the beach"), &bindings).unwrap();
        assert_eq!(g.value(var).data(), eager.tokens.data());
    }

    #[test]
    fn templates_are_encodable() {
        let v = Vocabulary::standard();
        let b = bound("S*", 0.1);
        for t in TEMPLATES {
            for noun in CLASS_NOUNS {
                v.encode_prompt(&fill_template(t, "S*", noun), &b).unwrap();
            }
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.bin");
        let v = Vocabulary::standard();
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
