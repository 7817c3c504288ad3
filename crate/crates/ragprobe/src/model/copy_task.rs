// SPDX-License-Identifier: MIT OR Apache-2.0

//! A handcrafted two-layer model that solves an in-context copy task, plus
//! the small vocabulary it speaks.
//!
//! The model answers prompts by *copying*: a designated head in layer 1
//! attends from the final position to whichever "content" token (a city
//! name) appears earlier in the sequence, copies its identity channels into
//! the residual stream, and the unembedding reads them back out. It has no
//! parametric knowledge — zero out a single attention edge and the answer is
//! gone — which makes every probe in this crate easy to sanity-check against
//! hand-derived numbers:
//!
//! * the copy head's attention weight on the content token is ≈ 1;
//! * knocking out the final-position → content-token edge collapses the
//!   answer probability, while unrelated edges barely matter;
//! * corrupting the content token's embedding destroys the answer, and a
//!   causal trace lights up exactly at the content position.
//!
//! Embedding layout (`d_model` = 16): dims 0..4 carry a one-hot city
//! identity, dims 4..7 a shared "content" flag, dim 7 a constant that every
//! token sets (the query driver), and dims 8..16 small per-token jitter so
//! the embedding table has realistic spread. Layer 0 is an exact no-op
//! (zero value/MLP weights); layer 1 hosts the copy head.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LayerWeights, ModelConfig, PositionalScheme, TransformerModel};
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

/// The four content words. Only the leading-space spelling is in the
/// vocabulary, so a city is always a single token and never a prompt prefix.
pub const COPY_TASK_CITIES: [&str; 4] = [" Dublin", " Warsaw", " Kyoto", " Paris"];

const D_MODEL: usize = 16;
const IDENTITY_DIMS: std::ops::Range<usize> = 0..4;
const CONTENT_FLAG_DIMS: std::ops::Range<usize> = 4..7;
const QUERY_DIM: usize = 7;
const JITTER_DIMS: std::ops::Range<usize> = 8..16;
const JITTER_STD: f32 = 0.25;
const JITTER_SEED: u64 = 0x00C0_FFEE;
/// Query gain (reads the constant dim), key gain (reads the content flag),
/// output gain (amplifies copied identity), unembedding gain.
const GAIN_Q: f32 = 2.0;
const GAIN_K: f32 = 2.0;
const GAIN_O: f32 = 4.0;
const GAIN_U: f32 = 5.0;

/// Where the copy-task model keeps its machinery; exposed so tests and
/// examples can address the content channels directly.
#[derive(Debug, Clone)]
pub struct CopyTaskLayout {
    /// `(spelling, token id)` for each city, in identity-dim order: city `k`
    /// owns embedding dim `k`.
    pub city_tokens: Vec<(String, u32)>,
    pub identity_dims: std::ops::Range<usize>,
    pub content_flag_dims: std::ops::Range<usize>,
    pub query_dim: usize,
    /// The layer hosting the copy head (layer 0 is a no-op).
    pub copy_layer: usize,
}

/// Every text piece the toy corpus needs. Sentence-initial words appear
/// bare, everything else with a leading space; single-character punctuation
/// rides on the byte tokens.
const TOY_WORDS: &[&str] = &[
    // Content words (leading-space form only).
    " Dublin", " Warsaw", " Kyoto", " Paris",
    // Fact subjects and templates.
    "Eavan", " Boland", "Marie", " Curie", "Haruki", " Murakami", "Marcel", " Proust",
    "County", "New", "Old", "South",
    " was", " born", " in", " named", " after",
    // Retrieval scaffold.
    "Information", " is", " below", "----------------",
    "Given", " the", " context", " information", " and", " not", " prior",
    " knowledge", " complete", " following",
    // Context-passage words.
    "She", "He", "Her", "His", "The", "Critics", "Readers", "Later", "Students",
    "Music", "Stories", "Illness", "Memory",
    " she", " he", " her", " his", " him", " it",
    " raised", " beside", " river", " early", " poems", " describe", " quiet",
    " streets", " family", " later", " moved", " abroad", " for", " work",
    " praised", " steady", " voice", " return", " to", " these", " lines",
    " often", " spent", " childhood", " with", " notebooks", " filled",
    " careful", " figures", " city", " schools", " shaped", " study",
    " travels", " took", " far", " away", " remember", " patient", " lessons",
    " near", " old", " quarter", " kept", " a", " small", " shop", " there",
    " rooms", " each", " evening", " coast", " school", " from", " this",
    " period", " feel", " calm", " grew", " up", " during", " busy", " years",
    " letters", " mention", " long", " walks", " salons", " welcomed",
    " quick", " wit", " indoors", " months", " became", " lasting", " subject",
];

/// The vocabulary the copy-task corpus is written in: 256 byte tokens, a
/// beginning-of-sequence marker, and the toy word list.
pub fn toy_vocabulary() -> Vocabulary {
    Vocabulary::standard(TOY_WORDS).expect("toy word list is well-formed")
}

/// Vanilla prompts the copy-task model answers correctly, paired with the
/// expected completion. The content token sits inside the subject, so the
/// model can copy it from the prompt itself.
pub fn canonical_copy_prompts() -> Vec<(String, String)> {
    [
        ("County Dublin", " Dublin"),
        ("New Warsaw", " Warsaw"),
        ("Old Kyoto", " Kyoto"),
        ("South Paris", " Paris"),
    ]
    .into_iter()
    .map(|(subject, city)| (format!("{subject} was named after"), city.to_string()))
    .collect()
}

/// Build the copy-task model over `vocab`. Fails if any content word is
/// missing from the vocabulary.
pub fn construct_copy_task_model(
    vocab: &Vocabulary,
) -> Result<(TransformerModel, CopyTaskLayout)> {
    let vocab_size = vocab.len();
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 1,
        d_model: D_MODEL,
        d_head: D_MODEL,
        d_mlp: 8,
        vocab_size,
        max_seq_len: 128,
        positional_scheme: PositionalScheme::LearnedAbsolute,
    };

    let mut city_tokens = Vec::with_capacity(COPY_TASK_CITIES.len());
    for spelling in COPY_TASK_CITIES {
        let id = vocab.text_id(spelling).ok_or_else(|| {
            Error::ModelConfig(format!("vocabulary lacks content word `{spelling}`"))
        })?;
        city_tokens.push((spelling.to_string(), id));
    }

    // Embedding table: constant query driver on every row, identity +
    // content flags on city rows, deterministic jitter on the spare dims.
    let mut embed_tokens = Array2::<f32>::zeros((vocab_size, D_MODEL));
    for t in 0..vocab_size {
        embed_tokens[[t, QUERY_DIM]] = 1.0;
    }
    for (k, (_, id)) in city_tokens.iter().enumerate() {
        let row = *id as usize;
        embed_tokens[[row, IDENTITY_DIMS.start + k]] = 1.0;
        for d in CONTENT_FLAG_DIMS {
            embed_tokens[[row, d]] = 1.0;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(JITTER_SEED);
    let jitter = Normal::new(0.0f32, JITTER_STD).unwrap();
    for t in 0..vocab_size {
        for d in JITTER_DIMS {
            embed_tokens[[t, d]] = jitter.sample(&mut rng);
        }
    }

    // Positions carry no information; the copy head finds content by
    // signature, not by location.
    let embed_pos = Array2::<f32>::zeros((config.max_seq_len, D_MODEL));

    // Layer 0: exact no-op (zero value path, zero MLP).
    let silent = LayerWeights::zeros(&config);

    // Layer 1: the copy head. Queries read the constant dim, keys sum the
    // content flags, values carry the identity dims, and the output
    // projection amplifies them back into the residual stream.
    let mut copy = LayerWeights::zeros(&config);
    copy.w_q[[QUERY_DIM, 0]] = GAIN_Q;
    for d in CONTENT_FLAG_DIMS {
        copy.w_k[[d, 0]] = GAIN_K;
    }
    for d in IDENTITY_DIMS {
        copy.w_v[[d, d]] = 1.0;
        copy.w_o[[d, d]] = GAIN_O;
    }

    let mut unembed = Array2::<f32>::zeros((D_MODEL, vocab_size));
    for (k, (_, id)) in city_tokens.iter().enumerate() {
        unembed[[IDENTITY_DIMS.start + k, *id as usize]] = GAIN_U;
    }

    let model = TransformerModel::from_parts(
        config,
        embed_tokens,
        Some(embed_pos),
        vec![silent, copy],
        Array1::ones(D_MODEL),
        Array1::zeros(D_MODEL),
        unembed,
    )?;
    let layout = CopyTaskLayout {
        city_tokens,
        identity_dims: IDENTITY_DIMS,
        content_flag_dims: CONTENT_FLAG_DIMS,
        query_dim: QUERY_DIM,
        copy_layer: 1,
    };
    Ok((model, layout))
}
