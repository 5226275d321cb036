use lognet::checkpoint::Checkpoint;
use lognet::config::{ModelConfig, TrainConfig};
use lognet::data::{self, DataConfig, Family, Split, MAX_QUESTION_LEN};
use lognet::model::{LogNet, ModelInput};
use lognet::train::{clip_global_norm, Trainer};
use lognet::visual::RegionFeature;
use lognet::{Gradients, ParamStore, Tensor};
use proptest::prelude::*;

fn region(x: f64, y: f64, w: f64, h: f64, app: &[f64]) -> RegionFeature {
    RegionFeature { appearance: app.to_vec(), bbox: [x, y, x + w, y + h] }
}

fn input_strategy(max_objects: usize) -> impl Strategy<Value = ModelInput> {
    let obj = (0.0..0.6f64, 0.0..0.6f64, 0.05..0.4f64, 0.05..0.4f64, prop::collection::vec(-2.0..2.0f64, 16))
        .prop_map(|(x, y, w, h, app)| region(x, y, w, h, &app));
    (prop::collection::vec(obj, 2..=max_objects), prop::collection::vec(2usize..10, 1..=MAX_QUESTION_LEN))
        .prop_map(|(regions, tokens)| ModelInput { tokens, regions, label: 0 })
}

fn tiny() -> LogNet {
    let mut cfg = ModelConfig::tiny(10, 5);
    cfg.steps = 3;
    LogNet::new(cfg, 11).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn forward_is_permutation_invariant(input in input_strategy(10), seed in any::<u64>()) {
        let net = tiny();
        let n = input.regions.len();
        let mut perm: Vec<usize> = (0..n).collect();
        // deterministic shuffle from the seed
        for i in (1..n).rev() {
            perm.swap(i, (seed.rotate_left(i as u32) % (i as u64 + 1)) as usize);
        }
        let a = net.forward(&input, true).unwrap();
        let b = net.forward(&input.permuted(&perm), true).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            prop_assert!((x - y).abs() < 1e-10);
        }
        for (ta, tb) in a.traces.iter().zip(&b.traces) {
            for i in 0..n {
                prop_assert!((tb.delta[i] - ta.delta[perm[i]]).abs() < 1e-10);
                for j in 0..n {
                    prop_assert!((tb.adjacency.get(i, j) - ta.adjacency.get(perm[i], perm[j])).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn adjacency_and_binding_bounds(input in input_strategy(10)) {
        let net = tiny();
        let out = net.forward(&input, true).unwrap();
        let r = net.config.descriptor_rows as f64;
        let p = net.config.lexical_types as f64;
        for t in &out.traces {
            let a = &t.adjacency;
            for i in 0..a.rows() {
                let row: f64 = (0..a.cols()).map(|j| a.get(i, j)).sum();
                prop_assert!(row <= r + 1e-9);
                for j in 0..a.cols() {
                    prop_assert_eq!(a.get(i, j).to_bits(), a.get(j, i).to_bits());
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&a.get(i, j)));
                }
                let mass: f64 = t.beta.row_values(i).iter().sum();
                prop_assert!((0.0..=p + 1e-9).contains(&mass));
            }
        }
    }

    #[test]
    fn trailing_padding_never_matters(input in input_strategy(6), pad in 1usize..6) {
        let net = tiny();
        let mut padded = input.clone();
        padded.tokens.extend(std::iter::repeat_n(lognet::text::PAD, pad));
        let a = net.forward(&input, false).unwrap().logits;
        let b = net.forward(&padded, false).unwrap().logits;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn generated_samples_satisfy_the_oracle(seed in any::<u64>(), index in 0usize..5000, fam in 0usize..5) {
        let cfg = DataConfig { seed, families: vec![Family::ALL[fam]], ..DataConfig::default() };
        let s = data::generate_sample(&cfg, Split::Val, index).unwrap();
        s.verify(cfg.max_objects).unwrap();
        prop_assert!(s.question_tokens.len() <= MAX_QUESTION_LEN);
        prop_assert!(Family::ALL[fam].answers().contains(&s.answer.as_str()));
        prop_assert_eq!(s, data::generate_sample(&cfg, Split::Val, index).unwrap());
    }

    #[test]
    fn checkpoint_bytes_round_trip(scale in 0.0..3.0f64, cut in 0.0..1.0f64) {
        let mut net = LogNet::new(ModelConfig::tiny(12, 4), 3).unwrap();
        let ids: Vec<_> = net.store.ids().collect();
        for id in ids {
            for (k, v) in net.store.get_mut(id).data_mut().iter_mut().enumerate() {
                *v += scale * ((k as f64) * 0.37).sin();
            }
        }
        let trainer = Trainer::new(net, TrainConfig::default()).unwrap();
        let vocab = lognet::text::Vocabulary::new((0..10).map(|i| format!("w{i}")));
        let answers = lognet::answer::AnswerSpace::new((0..4).map(|i| i.to_string()).collect()).unwrap();
        let c = Checkpoint::from_trainer(&trainer, &vocab, &answers);
        let bytes = c.to_bytes().unwrap();
        prop_assert_eq!(&Checkpoint::from_bytes(&bytes).unwrap(), &c);
        let n = ((bytes.len() - 1) as f64 * cut) as usize;
        prop_assert!(Checkpoint::from_bytes(&bytes[..n]).is_err());
    }

    #[test]
    fn clipping_bounds_the_norm(g in prop::collection::vec(-100.0..100.0f64, 1..20), max in 0.1..10.0f64) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::column(vec![0.0; g.len()]));
        let mut grads = Gradients::for_store(&store);
        grads.accumulate(id, &g);
        let before = clip_global_norm(&mut grads, max);
        prop_assert!(grads.global_norm() <= max * (1.0 + 1e-12));
        if before <= max {
            prop_assert_eq!(grads.get(id).unwrap(), &g[..]);
        }
    }
}

#[test]
fn audited_split_is_balanced() {
    let cfg = DataConfig { train: 2000, ..DataConfig::default() };
    let samples = data::generate_split(&cfg, Split::Train).unwrap();
    let audit = data::Audit::of(&samples);
    audit.check().unwrap();
    assert!(audit.majority_rate <= 0.35);
    assert_eq!(audit.families.len(), 5);
}
