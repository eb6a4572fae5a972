use fewshot_core::data::{generate_synthetic_dataset, mix_seed, Split};
use fewshot_core::embeddings::synth_embeddings_aligned;
use fewshot_core::encoder::{Encoder, ModelConfig};
use fewshot_core::evaluation::{evaluate, Classifier};
use fewshot_core::nn::Activation;
use fewshot_core::prompt::{Mechanism, PromptConfig, PromptModule};
use fewshot_core::training::{meta_train, pretrain, ClassifierHead, TrainConfig};

fn study_model() -> ModelConfig {
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

fn run_seed(seed: u64) -> (f64, [f64; 3], f64, f64) {
    let model = study_model();
    let data_seed = mix_seed(&[seed, 0xDA7A]);
    let ds = generate_synthetic_dataset(20, 20, 16, 4, data_seed).unwrap();
    let classes: Vec<(usize, String)> = {
        let mut all = ds.classes(Split::Base);
        all.extend(ds.classes(Split::Validation));
        all.extend(ds.classes(Split::Novel));
        all
    };
    let table = synth_embeddings_aligned(&classes, 32, data_seed, 4, 7).unwrap();

    let mut enc = Encoder::init(model.clone(), mix_seed(&[seed, 1])).unwrap();
    let mut head = ClassifierHead::zeros(ds.classes(Split::Base).len(), model.width);
    let mut ptc = TrainConfig::pretrain_desk(mix_seed(&[seed, 2]));
    ptc.epochs = 25;
    let t0 = std::time::Instant::now();
    let curve = pretrain(&mut enc, &mut head, &ds, &ptc).unwrap();
    let pre_acc = curve.last("train", "acc").unwrap();
    let t_pre = t0.elapsed().as_secs_f64();

    let eval_seed = 4242u64;
    let t1 = std::time::Instant::now();
    let baseline = evaluate(&enc, None, &ds.validation, 5, 1, 15, 200, Classifier::CosineNn, eval_seed)
        .unwrap()
        .mean_acc;
    let t_eval = t1.elapsed().as_secs_f64();

    let mut results = [0.0f64; 3];
    let mechs = [Mechanism::Si, Mechanism::Ci, Mechanism::Both];
    let t2 = std::time::Instant::now();
    for (i, mech) in mechs.iter().enumerate() {
        let mut enc_m = enc.clone();
        let mut pcfg = PromptConfig::new(model.depth, 32);
        pcfg.mechanism = *mech;
        let mut pm = PromptModule::init(pcfg.clone(), &model, mix_seed(&[seed, 3, i as u64])).unwrap();
        let mut tc = TrainConfig::meta_desk(pcfg, mix_seed(&[seed, 4, i as u64]));
        tc.epochs = 2;
        tc.queries_per_class = 10;
        meta_train(&mut enc_m, &mut pm, &ds, &table, &tc).unwrap();
        results[i] = evaluate(&enc_m, Some((&pm, &table)), &ds.validation, 5, 1, 15, 200, Classifier::CosineNn, eval_seed)
            .unwrap()
            .mean_acc;
    }
    let mut enc_first = enc.clone();
    let mut pcfg1 = PromptConfig::new(model.depth, 32);
    pcfg1.mechanism = Mechanism::Both;
    pcfg1.inject_layer = 1;
    let mut pm1 = PromptModule::init(pcfg1.clone(), &model, mix_seed(&[seed, 3, 9])).unwrap();
    let mut tc1 = TrainConfig::meta_desk(pcfg1, mix_seed(&[seed, 4, 9]));
    tc1.epochs = 2;
    tc1.queries_per_class = 10;
    meta_train(&mut enc_first, &mut pm1, &ds, &table, &tc1).unwrap();
    let first_layer = evaluate(&enc_first, Some((&pm1, &table)), &ds.validation, 5, 1, 15, 200, Classifier::CosineNn, eval_seed)
        .unwrap()
        .mean_acc;
    let t_meta = t2.elapsed().as_secs_f64();
    eprintln!(
        "seed {seed}: pre {pre_acc:.3} ({t_pre:.0}s) base {baseline:.4} ({t_eval:.0}s/eval) si {:.4} ci {:.4} both {:.4} both@1 {first_layer:.4} (4 meta+evals {t_meta:.0}s)",
        results[0], results[1], results[2]
    );
    (baseline, results, first_layer, pre_acc)
}

fn main() {
    let t = std::time::Instant::now();
    let out: Vec<_> = (0..5u64).map(run_seed).collect();
    let mean = |f: &dyn Fn(&(f64, [f64; 3], f64, f64)) -> f64| {
        out.iter().map(f).sum::<f64>() / out.len() as f64
    };
    println!("--- means over 5 seeds ---");
    println!("pretrain acc {:.4}", mean(&|r| r.3));
    println!("baseline {:.4}", mean(&|r| r.0));
    println!("si       {:.4}", mean(&|r| r.1[0]));
    println!("ci       {:.4}", mean(&|r| r.1[1]));
    println!("both     {:.4}", mean(&|r| r.1[2]));
    println!("both@L1  {:.4}", mean(&|r| r.2));
    println!("total wall: {:?}", t.elapsed());
}
