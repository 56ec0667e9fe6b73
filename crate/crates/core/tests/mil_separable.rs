use pathpt::corpus::{generate_corpus, CorpusConfig};
use pathpt::mil::{mil_train, MilModel, MilVariant};
use pathpt::training::{sample_few_shot, TrainConfig};

#[test]
fn noise_free_corpus_is_fit_at_ten_shots() {
    let cfg = CorpusConfig { sigma_align: 0.0, sigma_tile: 0.0, slides_per_class: 20, ..Default::default() };
    let corpus = generate_corpus(&cfg).unwrap();
    let c = corpus.labels.num_subtypes();
    for variant in [MilVariant::AbmilGated, MilVariant::MeanPool] {
        let mut perfect = 0;
        for seed in 0..10u64 {
            let split = sample_few_shot(&corpus.slides, c, 10, seed).unwrap();
            let mut model = MilModel::new(variant, cfg.dim, c, seed);
            let train = TrainConfig { seed, ..Default::default() };
            mil_train(&mut model, &corpus.slides, &split, &train).unwrap();
            let idx: Vec<usize> = split.train_indices().collect();
            let hits =
                idx.iter().filter(|&&i| model.forward(&corpus.slides[i]).unwrap().prediction() == corpus.slides[i].slide_label).count();
            perfect += usize::from(hits == idx.len());
        }
        assert!(perfect >= 9, "{variant:?}: {perfect}/10 seeds fit the training slides");
    }
}
