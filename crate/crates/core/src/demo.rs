//! A small self-contained movie setup: catalog, trained recommender, linker
//! and ready-made pipelines. Used by `init-demo` and by tests.

use std::collections::HashMap;
use std::sync::Arc;

use once_cell::sync::Lazy;
use parking_lot::Mutex;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::generator::{GenStyle, LlmEndpointConfig, LlmGen, LlmGenConfig, TemplateGen};
use crate::linker::{EntityLinker, LinkerConfig};
use crate::module::Module;
use crate::pipeline::{Pipeline, PipelineConfig, PipelineKind};
use crate::recommender::{train, AutoRecParams, RatingVector, RedialRec, RedialRecConfig, SentimentLexicon, TrainConfig};
use crate::tokenization::{CompositeTokenizer, EntityCatalog, Vocab};

/// Genre blocks of eight titles each; users in the synthetic data set stick
/// to one block.
pub const MOVIES: [&str; 32] = [
    // comedy
    "Billy Madison (1995)",
    "Happy Gilmore (1996)",
    "50 First Dates (2004)",
    "The Waterboy (1998)",
    "Grown Ups (2010)",
    "Big Daddy (1999)",
    "Click (2006)",
    "Anger Management (2003)",
    // drama
    "Forever My Girl (2018)",
    "The Notebook (2004)",
    "A Walk to Remember (2002)",
    "Titanic (1997)",
    "The Fault in Our Stars (2014)",
    "Pride & Prejudice (2005)",
    "Me Before You (2016)",
    "Dear John (2010)",
    // horror
    "The Conjuring (2013)",
    "Insidious (2010)",
    "It (2017)",
    "Get Out (2017)",
    "Hereditary (2018)",
    "The Ring (2002)",
    "Sinister (2012)",
    "A Quiet Place (2018)",
    // animation
    "Up (2009)",
    "Toy Story (1995)",
    "Finding Nemo (2003)",
    "Inside Out (2015)",
    "Coco (2017)",
    "Ratatouille (2007)",
    "WALL-E (2008)",
    "Zootopia (2016)",
];

pub const GENRE_SIZE: usize = 8;

pub const API_KEY_ENV: &str = "CRSKIT_LLM_API_KEY";

pub fn catalog() -> EntityCatalog {
    EntityCatalog::new(MOVIES).expect("demo titles are unique")
}

/// Rating vectors for `users` synthetic users: several liked titles from one
/// genre and a few disliked titles from other genres.
pub fn synthetic_ratings(users: usize, seed: u64) -> Vec<RatingVector> {
    let n = MOVIES.len();
    let genres = n / GENRE_SIZE;
    let mut rng = StdRng::seed_from_u64(seed);
    (0..users)
        .map(|u| {
            let g = u % genres;
            let mut own: Vec<u32> = (0..GENRE_SIZE).map(|i| (g * GENRE_SIZE + i) as u32).collect();
            own.shuffle(&mut rng);
            let liked = rng.random_range(3..=5);
            let mut r = RatingVector::new(n);
            for &id in &own[..liked] {
                r.set(id, 1).expect("in range");
            }
            for _ in 0..rng.random_range(2..=3) {
                let other = (g + rng.random_range(1..genres)) % genres;
                let id = other * GENRE_SIZE + rng.random_range(0..GENRE_SIZE);
                r.set(id as u32, -1).expect("in range");
            }
            r
        })
        .collect()
}

/// Two preference clusters over `2 * cluster` items. Every user likes all of
/// their own cluster; the observed input holds `shown` of those likes plus
/// `dislikes` items from the other cluster, the remaining likes are held out.
#[derive(Debug, Clone)]
pub struct ClusterSplit {
    pub inputs: Vec<RatingVector>,
    pub held_out: Vec<Vec<u32>>,
}

pub fn two_cluster_split(users: usize, cluster: usize, shown: usize, dislikes: usize, seed: u64) -> ClusterSplit {
    let n = 2 * cluster;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(users);
    let mut held_out = Vec::with_capacity(users);
    for u in 0..users {
        let c = u % 2;
        let mut own: Vec<u32> = (0..cluster).map(|i| (c * cluster + i) as u32).collect();
        let mut other: Vec<u32> = (0..cluster).map(|i| ((1 - c) * cluster + i) as u32).collect();
        own.shuffle(&mut rng);
        other.shuffle(&mut rng);
        let pairs = own[..shown]
            .iter()
            .map(|&i| (i, 1))
            .chain(other[..dislikes].iter().map(|&i| (i, -1)));
        inputs.push(RatingVector::from_pairs(n, pairs).expect("ids in range"));
        held_out.push(own[shown..].to_vec());
    }
    ClusterSplit { inputs, held_out }
}

fn trained_params(seed: u64, hidden: usize) -> AutoRecParams {
    static CACHE: Lazy<Mutex<HashMap<u64, AutoRecParams>>> = Lazy::new(Default::default);
    if let Some(p) = CACHE.lock().get(&seed) {
        return p.clone();
    }
    let data = synthetic_ratings(160, seed);
    let mut rng = StdRng::seed_from_u64(seed.wrapping_add(1));
    let init = AutoRecParams::random(MOVIES.len(), hidden, 0.5, &mut rng);
    let report = train(
        &init,
        &data,
        TrainConfig {
            epochs: 300,
            lr: 0.5,
            lambda: 1e-4,
        },
    )
    .expect("demo training converges");
    CACHE.lock().insert(seed, report.params.clone());
    report.params
}

/// Trains the demo recommender; deterministic for a given seed.
pub fn recommender(name: &str, seed: u64) -> RedialRec {
    let hidden = 16;
    let params = trained_params(seed, hidden);
    let lexicon = SentimentLexicon::default();
    let tokenizer = RedialRec::default_tokenizer(catalog(), &lexicon);
    RedialRec::new(
        name,
        params,
        tokenizer,
        lexicon,
        RedialRecConfig {
            hidden,
            ..Default::default()
        },
    )
    .expect("shapes agree")
}

pub fn linker(name: &str) -> EntityLinker {
    let vocab = Vocab::build(MOVIES, 1);
    EntityLinker::new(name, CompositeTokenizer::word(vocab, catalog()), LinkerConfig::default())
}

pub fn llm_generator(name: &str, style: GenStyle, base_url: &str, model: &str) -> LlmGen {
    let endpoint = LlmEndpointConfig::new(base_url, model, API_KEY_ENV);
    LlmGen::new(name, LlmGenConfig::with_default_prompt(endpoint, style)).expect("demo endpoint config is valid")
}

/// A pipeline using the offline template generator, fully deterministic.
pub fn template_pipeline(kind: PipelineKind) -> Pipeline {
    let (name, style) = match kind {
        PipelineKind::Expansion => ("demo-expansion", GenStyle::Expansion),
        PipelineKind::Fillblank => ("demo-fillblank", GenStyle::Fillblank),
    };
    let rec: Arc<dyn Module> = Arc::new(recommender("demo-rec", 7));
    let gen: Arc<dyn Module> = Arc::new(TemplateGen::new(format!("{name}-gen"), style));
    let proc: Arc<dyn Module> = Arc::new(linker("demo-linker"));
    Pipeline::new(name, PipelineConfig::new(kind), rec, gen, Some(proc)).expect("demo modules have matching kinds")
}
