use std::path::Path;
use ofakd::data;
use ofakd::losses::{kd_loss, LossConfig};
use ofakd::nn::{build_model, load_model, ModelConfig};
use ofakd::tensor::no_grad;
use ofakd::trainer::{clip_gradients, evaluate, Optimizer, OptimizerConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args[1].parse().unwrap();
    let epochs: usize = args[2].parse().unwrap();
    let scale: f64 = args[3].parse().unwrap();
    let lambda: f64 = args[4].parse().unwrap();
    let teacher = load_model::<f32>(Path::new(&args[5])).unwrap();
    let train = data::load(Path::new("/tmp/bench/datab/train.ofad")).unwrap();
    let test = data::load(Path::new("/tmp/bench/datab/test.ofad")).unwrap();
    let student = build_model::<f32>(&ModelConfig::cnn(8, seed)).unwrap();
    let mut cfg = OptimizerConfig::momentum_sgd();
    cfg.epochs = epochs;
    let mut opt = Optimizer::new(cfg.clone(), student.params());
    let loss_cfg = LossConfig { scale, lambda, ..LossConfig::default() };
    for epoch in 0..epochs {
        let lr = cfg.lr_at(epoch);
        let shuffle_seed = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(epoch as u64);
        for batch in train.batches(64, shuffle_seed, true).unwrap() {
            let (x, labels) = train.gather::<f32>(&batch).unwrap();
            let t_logits = no_grad(|| teacher.forward(&x)).unwrap();
            let s_logits = student.forward(&x).unwrap();
            let loss = kd_loss(&s_logits, &t_logits, &labels, &loss_cfg).unwrap();
            opt.zero_grads();
            loss.backward().unwrap();
            clip_gradients(opt.params(), 5.0);
            opt.step(lr);
        }
    }
    println!("kd seed {seed} epochs {epochs} scale {scale} lambda {lambda}: {}", evaluate(&student, &test, 64).unwrap().0);
}
