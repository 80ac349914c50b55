use std::path::Path;
use ofakd::data::{self, Dataset};
use ofakd::nn::ModelConfig;
use ofakd::trainer::{pretrain_teacher, RunManifest};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let shuffle_seed: u64 = args[1].parse().unwrap();
    let train_seed: u64 = args[2].parse().unwrap();
    let train = data::load(Path::new("/tmp/bench/datab/train.ofad")).unwrap();
    let mut labels = train.labels.clone();
    let mut r = ChaCha8Rng::seed_from_u64(shuffle_seed);
    for i in (1..labels.len()).rev() {
        labels.swap(i, r.gen_range(0..=i));
    }
    let shuffled = Dataset { labels, ..train };
    let dir = std::env::temp_dir().join(format!("ctl-{shuffle_seed}-{train_seed}"));
    std::fs::create_dir_all(&dir).unwrap();
    data::save(&shuffled, &dir.join("train.ofad")).unwrap();
    std::fs::copy("/tmp/bench/datab/test.ofad", dir.join("test.ofad")).unwrap();
    let mut m = RunManifest::new(ModelConfig::cnn(8, train_seed), dir.clone(), dir.join("run"));
    m.optimizer.epochs = 20;
    let acc = pretrain_teacher::<f32>(&m).unwrap().final_test_acc;
    println!("shuffle {shuffle_seed} train {train_seed}: control acc {acc}");
}
