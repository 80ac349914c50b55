use std::path::Path;
use ofakd::cka::{cka, flatten_features};
use ofakd::data;
use ofakd::nn::load_model;
use ofakd::tensor::{no_grad, Tensor};

fn pooled(x: &Tensor<f32>) -> Tensor<f32> {
    // mean over every non-leading, non-channel-last axis: [n,c,h,w] -> [n,c]; [n,t,e] -> [n,e]
    let s = x.shape();
    let d = x.detach();
    match s.len() {
        4 => d.mean_axis(3).unwrap().mean_axis(2).unwrap(),
        3 => d.mean_axis(1).unwrap(),
        _ => d,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (a, b) = (&args[1], &args[2]);
    let ma = load_model::<f32>(Path::new(a)).unwrap();
    let mb = load_model::<f32>(Path::new(b)).unwrap();
    let ds = data::load(Path::new("/tmp/bench/datab/test.ofad")).unwrap();
    let idx = ofakd::cli::sample_subset(ds.len(), 128, 17);
    let (x, _) = ds.gather::<f32>(&idx).unwrap();
    let (fa, _) = no_grad(|| ma.forward_collect(&x)).unwrap();
    let (fb, _) = no_grad(|| mb.forward_collect(&x)).unwrap();
    let mut flat = Vec::new();
    let mut pool = Vec::new();
    for (p, q) in fa.iter().zip(&fb) {
        flat.push(cka(&flatten_features(p).unwrap(), &flatten_features(q).unwrap()).unwrap());
        pool.push(cka(&pooled(p), &pooled(q)).unwrap());
    }
    println!("flat {:?} mean {:.4}", flat.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>(), flat.iter().sum::<f64>()/flat.len() as f64);
    println!("pool {:?} mean {:.4}", pool.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>(), pool.iter().sum::<f64>()/pool.len() as f64);
}
