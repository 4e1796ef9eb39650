mod common;

use relprop::autodiff::{Graph, ParamGroup, ParamStore};
use relprop::gate::GateKind;
use relprop::model::{GateOptions, RelevanceOverride};
use relprop::rng::{substream, Stream};
use relprop::Real;

use common::{analytic, fd_check, tiny, Tiny};

fn tagging_loss(
    t: &Tiny,
    opts: GateOptions,
    train: bool,
) -> impl Fn(&mut Graph, &ParamStore) -> relprop::autodiff::Var + '_ {
    move |g, s| {
        // Fresh streams per evaluation so every call sees the same masks and noise.
        let mut d = substream(3, Stream::Dropout);
        let mut gu = substream(3, Stream::Gumbel);
        let out = t
            .model
            .ner_forward(g, s, &t.words, &t.seq, &opts, train, &mut d, &mut gu)
            .unwrap();
        t.model.tagger.nll(g, s, out.emissions, &t.gold).unwrap()
    }
}

#[test]
fn dropout_masks_are_differentiable_under_a_fixed_stream() {
    let mut t = tiny(21);
    let mut cfg = common::tiny_config();
    cfg.encoder.dropout = 0.3;
    cfg.tagger.dropout = 0.3;
    let mut store = ParamStore::new();
    let mut rng = substream(21, Stream::Init);
    t.model = relprop::model::RpModel::new(
        &mut store,
        &cfg,
        common::tiny_vocab(),
        relprop::data::TagSet::new(&["ORG", "LOC"]),
        &mut rng,
    )
    .unwrap();
    t.store = store;
    let loss = tagging_loss(&t, GateOptions::default(), true);
    let mut s = t.store.clone();
    let r = fd_check(&mut s, &loss, 60, 1);
    assert!(r.max_rel < 1e-4, "{r:?}");
}

#[test]
fn gumbel_gate_is_differentiable_given_its_noise() {
    let t = tiny(22);
    let opts = GateOptions {
        kind: GateKind::Gumbel,
        tau: 0.5,
        ..GateOptions::default()
    };
    let loss = tagging_loss(&t, opts, true);
    let mut s = t.store.clone();
    let r = fd_check(&mut s, &loss, 60, 2);
    assert!(r.max_rel < 1e-4, "{r:?}");
}

#[test]
fn detached_gradient_equals_gradient_at_frozen_score() {
    let t = tiny(23);
    let mut g = Graph::new();
    let mut rng = substream(0, Stream::Dropout);
    let logits = t
        .model
        .relation_logits(&mut g, &t.store, &t.seq, false, &mut rng)
        .unwrap();
    let p = g.value(logits).data().to_vec();
    let r = 1.0 / (1.0 + (p[0] - p[1]).exp());

    let detached = GateOptions {
        detach: true,
        ..GateOptions::default()
    };
    let frozen = GateOptions {
        relevance: RelevanceOverride::Fixed(r),
        ..GateOptions::default()
    };
    let a = analytic(&t.store, &tagging_loss(&t, detached, false));
    let b = analytic(&t.store, &tagging_loss(&t, frozen, false));
    let relation: Vec<_> = t.model.relation_params().to_vec();
    for (id, ga) in &a {
        assert!(!relation.contains(id), "relation head received a tagging gradient");
        let gb = &b.iter().find(|(q, _)| q == id).expect("same parameters touched").1;
        for (x, y) in ga.iter().zip(gb.iter()) {
            assert!(
                (x - y).abs() <= 1e-10 * x.abs().max(1.0),
                "{}: {x} vs {y}",
                t.store.name(*id)
            );
        }
    }
}

#[test]
fn attached_soft_gate_reaches_the_relation_head() {
    let t = tiny(24);
    let grads = analytic(&t.store, &tagging_loss(&t, GateOptions::default(), false));
    let head: Real = grads
        .iter()
        .filter(|(id, _)| t.store.group(*id) == ParamGroup::RelationHead)
        .flat_map(|(_, g)| g.iter().map(|v| v.abs()))
        .sum();
    assert!(head > 0.0);
}
