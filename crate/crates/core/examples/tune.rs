use fewshot_core::data::{generate_synthetic_dataset, mix_seed, Split};
use fewshot_core::embeddings::synth_embeddings_aligned;
use fewshot_core::encoder::{Encoder, ModelConfig};
use fewshot_core::evaluation::{evaluate, Classifier};
use fewshot_core::nn::Activation;
use fewshot_core::prompt::{Mechanism, PromptConfig, PromptModule};
use fewshot_core::training::{meta_train, pretrain, ClassifierHead, TrainConfig};

fn model() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        channels: 1,
        patch_size: 4,
        depth: 4,
        width: 48,
        heads: 4,
        mlp_ratio: 2,
        activation: Activation::GeluTanh,
        ln_eps: 1e-5,
        scale_exponent: 0.25,
    }
}

fn main() {
    // pretrain convergence across study seeds at 30 epochs
    for seed in 0..5u64 {
        let data_seed = mix_seed(&[seed, 0xDA7A]);
        let ds = generate_synthetic_dataset(20, 20, 16, 4, data_seed).unwrap();
        let mut enc = Encoder::init(model(), mix_seed(&[seed, 1])).unwrap();
        let mut head = ClassifierHead::zeros(10, 48);
        let mut ptc = TrainConfig::pretrain_desk(mix_seed(&[seed, 2]));
        ptc.epochs = 30;
        let curve = pretrain(&mut enc, &mut head, &ds, &ptc).unwrap();
        println!("seed {seed}: pretrain acc @30 = {:.3}", curve.last("train", "acc").unwrap());
    }

    // lr_projectors sweep on the two competitive seeds
    for seed in [0u64, 4] {
        let data_seed = mix_seed(&[seed, 0xDA7A]);
        let ds = generate_synthetic_dataset(20, 20, 16, 4, data_seed).unwrap();
        let classes: Vec<(usize, String)> = {
            let mut all = ds.classes(Split::Base);
            all.extend(ds.classes(Split::Validation));
            all.extend(ds.classes(Split::Novel));
            all
        };
        let table = synth_embeddings_aligned(&classes, 32, data_seed, 4, 7).unwrap();
        let mut enc = Encoder::init(model(), mix_seed(&[seed, 1])).unwrap();
        let mut head = ClassifierHead::zeros(10, 48);
        let mut ptc = TrainConfig::pretrain_desk(mix_seed(&[seed, 2]));
        ptc.epochs = 30;
        pretrain(&mut enc, &mut head, &ds, &ptc).unwrap();
        let eval_seed = 4242u64;
        let baseline = evaluate(&enc, None, &ds.validation, 5, 1, 15, 200, Classifier::CosineNn, eval_seed)
            .unwrap()
            .mean_acc;
        println!("seed {seed}: baseline {baseline:.4}");
        for lr_proj in [1e-3f64, 2e-3] {
            for (label, mech) in [("si", Mechanism::Si), ("ci", Mechanism::Ci), ("both", Mechanism::Both)] {
                let mut enc_m = enc.clone();
                let mut pcfg = PromptConfig::new(4, 32);
                pcfg.mechanism = mech;
                let mut pm = PromptModule::init(pcfg.clone(), &model(), mix_seed(&[seed, 3])).unwrap();
                let mut tc = TrainConfig::meta_desk(pcfg, mix_seed(&[seed, 4]));
                tc.epochs = 2;
                tc.queries_per_class = 10;
                tc.lr_projectors = lr_proj;
                meta_train(&mut enc_m, &mut pm, &ds, &table, &tc).unwrap();
                let acc = evaluate(&enc_m, Some((&pm, &table)), &ds.validation, 5, 1, 15, 200, Classifier::CosineNn, eval_seed)
                    .unwrap()
                    .mean_acc;
                println!("  seed {seed} lrp {lr_proj:.0e} {label:>4}: {acc:.4}");
            }
        }
    }
}
