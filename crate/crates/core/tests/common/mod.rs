#![allow(dead_code)]

use std::collections::BTreeSet;

use itercqr::data::{build_instances, generate_toy_corpus, imperfect_rewrites, split_sessions, DatasetVersion, Provenance, ReformulationInstance, ToyCorpus};
use itercqr::embedding::{EmbeddingStore, HashingEncoder};
use itercqr::evaluation::{evaluate_entries, Qrels};
use itercqr::generator::{Generator, Vocab};
use itercqr::orchestrator::{build_vocab, RunInputs};
use itercqr::retrieval::{dense_search, RunEntry};

pub struct Toy {
    pub corpus: ToyCorpus,
    pub train: Vec<ReformulationInstance>,
    pub test: Vec<ReformulationInstance>,
    pub store: EmbeddingStore,
    pub encoder: HashingEncoder,
    pub d0: DatasetVersion,
    pub vocab: Vocab,
}

impl Toy {
    pub fn new(seed: u64, sessions: usize, turns: usize, resolve_fraction: f64) -> Toy {
        let corpus = generate_toy_corpus(seed, sessions, turns, sessions).unwrap();
        let (train_s, test_s) = split_sessions(&corpus.sessions, 0.25, seed);
        let train = build_instances(&train_s);
        let test = build_instances(&test_s);
        let ids: BTreeSet<&str> = train.iter().map(|i| i.instance_id.as_str()).collect();
        let rows = imperfect_rewrites(&corpus, resolve_fraction, seed)
            .into_iter()
            .filter(|(id, _)| ids.contains(id.as_str()))
            .collect();
        let d0 = DatasetVersion::bootstrap(Provenance::File, rows);
        let encoder = HashingEncoder::default();
        let store = EmbeddingStore::build(&corpus.passages, &encoder).unwrap();
        let vocab = build_vocab(&train, &d0, &corpus.passages).unwrap();
        Toy {
            corpus,
            train,
            test,
            store,
            encoder,
            d0,
            vocab,
        }
    }

    pub fn inputs(&self) -> RunInputs<'_> {
        RunInputs {
            instances: &self.train,
            store: &self.store,
            encoder: &self.encoder,
            d0: &self.d0,
            vocab: &self.vocab,
        }
    }

    pub fn qrels(&self, instances: &[ReformulationInstance]) -> Qrels {
        instances
            .iter()
            .map(|i| (i.instance_id.clone(), i.gold_passage_ids.iter().cloned().collect()))
            .collect()
    }

    /// Dense run over `instances` using the model's top beam rewrite.
    pub fn dense_run(&self, model: &Generator, instances: &[ReformulationInstance], beam: usize) -> Vec<RunEntry> {
        instances
            .iter()
            .map(|inst| {
                let q = model.reformulate(&inst.model_input(), beam).unwrap().text;
                dense_search(&inst.instance_id, &q, &self.store, &self.encoder, 100, "dense").unwrap()
            })
            .collect()
    }

    pub fn dense_mrr(&self, model: &Generator, instances: &[ReformulationInstance], beam: usize) -> f64 {
        let run = self.dense_run(model, instances, beam);
        let (per_query, _) = evaluate_entries(&run, &self.qrels(instances)).unwrap();
        per_query.values().map(|m| m.mrr).sum::<f64>() / per_query.len() as f64
    }
}
