//! Scratch probe: mono embedding norms on a small dataset.
use stereoface::eval::embed_split;
use stereoface::facegen::dataset::{Manifest, Split};
use stereoface::recognet::MonoFusion;
use stereoface::train::TrainedModel;

fn main() {
    let data = std::path::Path::new("/tmp/sf_e2e/data");
    let model = TrainedModel::load(std::path::Path::new("/tmp/sf_e2e/runs/mono/model.ckpt")).unwrap();
    let manifest = Manifest::load(data).unwrap();
    let embs = embed_split(&model, data, &manifest, Split::Train, MonoFusion::Left).unwrap();
    let norms: Vec<f64> = embs.iter().map(|e| e.emb.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()).collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let max = norms.iter().cloned().fold(0.0, f64::max);
    println!("mono embedding norms: mean {mean:.3} max {max:.3}");
    let d2: f64 = embs[0].emb.iter().zip(&embs[1].emb).map(|(a,b)| ((a-b) as f64).powi(2)).sum();
    println!("sample pair squared distance {d2:.3}, alpha term would be {:.1}", 50.0 * d2);
}
