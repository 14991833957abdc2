//! Frozen text, image and latent encoders, and the synthetic dataset.

pub mod autoencoder;
pub mod dataset;
pub mod image;
pub mod vocab;

pub use autoencoder::{psnr, Latent, LatentCodec, LATENT_CHANNELS, LATENT_SIZE};
pub use dataset::{generate_dataset, GeneratorParams, Shape, SyntheticConcept};
pub use image::{cosine, Image, ImageEncoder, VisualEmbedding, IMAGE_SIZE, VISUAL_DIM, VISUAL_TOKENS};
pub use vocab::{tokenize, PromptEmbedding, Vocabulary, EMBED_DIM, MAX_PROMPT_LEN, TEMPLATES};
