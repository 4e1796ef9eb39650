#![allow(dead_code)]

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relprop::autodiff::{Graph, ParamId, ParamStore, Var};
use relprop::data::{FeatureGrid, SynthConfig, SynthData, TagSet, Vocabularies};
use relprop::encoder::{EncoderConfig, MultimodalSequence};
use relprop::model::{ModelConfig, RpModel};
use relprop::ner::NerConfig;
use relprop::rng::{substream, Stream};
use relprop::Real;

pub const WORDS: [&str; 6] = ["the", "acme", "corp", "visited", "paris", "today"];

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            d_v: 4,
            dropout: 0.0,
            max_len: 32,
            ..EncoderConfig::desk()
        },
        tagger: NerConfig {
            word_dim: 4,
            char_dim: 3,
            char_hidden: 3,
            hidden: 4,
            layers: 1,
            dropout: 0.0,
        },
    }
}

pub fn tiny_vocab() -> Vocabularies {
    let sentences = [
        WORDS.map(String::from).to_vec(),
        vec!["acme".to_string(), "paris".to_string()],
    ];
    Vocabularies::build(sentences.iter().map(Vec::as_slice), 1)
}

pub struct Tiny {
    pub model: RpModel,
    pub store: ParamStore,
    pub words: Vec<String>,
    pub seq: MultimodalSequence,
    pub gold: Vec<usize>,
}

pub fn random_grid(h: usize, w: usize, c: usize, seed: u64) -> FeatureGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeatureGrid::new(h, w, c, values).unwrap()
}

/// Tiny model with two entity types and one six-word sentence on a 2x2 grid.
pub fn tiny(seed: u64) -> Tiny {
    let mut store = ParamStore::new();
    let mut rng = substream(seed, Stream::Init);
    let tags = TagSet::new(&["ORG", "LOC"]);
    let model = RpModel::new(&mut store, &tiny_config(), tiny_vocab(), tags, &mut rng).unwrap();
    let words: Vec<String> = WORDS.map(String::from).to_vec();
    let seq = model.sequence(&words, &random_grid(2, 2, 4, seed + 100)).unwrap();
    let gold = vec![0, 1, 2, 0, 3, 0];
    Tiny {
        model,
        store,
        words,
        seq,
        gold,
    }
}

/// Scalar-valued loss builder used by the finite-difference checker.
pub type LossFn<'a> = dyn Fn(&mut Graph, &ParamStore) -> Var + 'a;

/// Analytic gradient of every coordinate touched by `loss`.
pub fn analytic(store: &ParamStore, loss: &LossFn) -> Vec<(ParamId, Vec<Real>)> {
    let mut g = Graph::new();
    let root = loss(&mut g, store);
    g.backward(root).unwrap();
    g.param_grads().map(|(id, gr)| (id, gr.to_vec())).collect()
}

pub fn eval_loss(store: &ParamStore, loss: &LossFn) -> Real {
    let mut g = Graph::new();
    let root = loss(&mut g, store);
    g.value(root).item()
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: Real,
    pub worst: String,
}

/// Compares analytic gradients with a five-point central difference on
/// `count` random coordinates that have a nonzero analytic gradient.
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn fd_check(store: &mut ParamStore, loss: &LossFn, count: usize, seed: u64) -> FdReport {
    const H: Real = 1e-4;
    const FLOOR: Real = 1e-6;
    let grads = analytic(store, loss);
    let coords: Vec<(ParamId, usize)> = grads
        .iter()
        .flat_map(|(id, g)| {
            g.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(move |(i, _)| (*id, i))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for _ in 0..count {
        let (id, i) = coords[rng.gen_range(0..coords.len())];
        let a = grads.iter().find(|(p, _)| *p == id).unwrap().1[i];
        let orig = store.value(id).data()[i];
        let mut at = |dx: Real| {
            store.value_mut(id).data_mut()[i] = orig + dx;
            eval_loss(store, loss)
        };
        let n = (at(-2.0 * H) - 8.0 * at(-H) + 8.0 * at(H) - at(2.0 * H)) / (12.0 * H);
        store.value_mut(id).data_mut()[i] = orig;
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
        report.checked += 1;
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = format!("{}[{i}] analytic {a:e} numeric {n:e}", store.name(id));
        }
    }
    report
}

/// Desk synthetic corpus at a reduced size for fast trainer tests.
pub fn small_synth(seed: u64) -> SynthData {
    relprop::data::synth_generate(&SynthConfig {
        ner_train: 24,
        ner_dev: 8,
        ner_test: 8,
        trc_pairs: 24,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}
