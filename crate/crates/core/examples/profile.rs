use fewshot_core::data::{generate_synthetic_dataset, Split};
use fewshot_core::embeddings::synth_embeddings_aligned;
use fewshot_core::encoder::{Encoder, ModelConfig};
use fewshot_core::evaluation::{evaluate, Classifier};
use fewshot_core::prompt::{Mechanism, PromptConfig, PromptModule};
use fewshot_core::training::{meta_train, pretrain, ClassifierHead, TrainConfig};
use std::time::Instant;

fn main() {
    let model = ModelConfig::desk();
    let ds = generate_synthetic_dataset(20, 20, 16, 4, 7).unwrap();
    let classes: Vec<(usize, String)> = {
        let mut all = ds.classes(Split::Base);
        all.extend(ds.classes(Split::Validation));
        all.extend(ds.classes(Split::Novel));
        all
    };
    let table = synth_embeddings_aligned(&classes, 32, 7, 4, 7).unwrap();

    let mut enc = Encoder::init(model.clone(), 1).unwrap();
    let mut head = ClassifierHead::zeros(10, model.width);
    let mut tc = TrainConfig::pretrain_desk(2);
    tc.epochs = 1;
    let t = Instant::now();
    pretrain(&mut enc, &mut head, &ds, &tc).unwrap();
    println!("pretrain 1 epoch (200 imgs, batch 32): {:?}", t.elapsed());

    let mut pcfg = PromptConfig::new(model.depth, 32);
    pcfg.mechanism = Mechanism::Both;
    let mut pm = PromptModule::init(pcfg.clone(), &model, 3).unwrap();
    let mut mc = TrainConfig::meta_desk(pcfg, 4);
    mc.epochs = 1;
    mc.episodes_per_epoch = 10;
    let t = Instant::now();
    meta_train(&mut enc, &mut pm, &ds, &table, &mc).unwrap();
    println!("meta 10 episodes (5w1s q15): {:?}", t.elapsed());

    let t = Instant::now();
    evaluate(&enc, Some((&pm, &table)), &ds.validation, 5, 1, 15, 50, Classifier::CosineNn, 1).unwrap();
    println!("eval 50 episodes prompted: {:?}", t.elapsed());
    let t = Instant::now();
    evaluate(&enc, None, &ds.validation, 5, 1, 15, 50, Classifier::CosineNn, 1).unwrap();
    println!("eval 50 episodes baseline: {:?}", t.elapsed());
}
