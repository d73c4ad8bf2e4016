use std::time::Instant;
use svkit_core::grad::{Tape, Tensor};
use svkit_core::loss::CombinedMarginHead;
use svkit_core::nets::{BackboneModel, Mode, NetConfig, ResNetConfig};

fn main() {
    let cfg = NetConfig::Resnet(ResNetConfig {
        base_channels: 4,
        block_counts: [1, 1, 1, 1],
        embedding_dim: 32,
        in_freq_bins: 64,
    });
    let mut model = BackboneModel::build(&cfg, 1).unwrap();
    model.set_mode(Mode::Train);
    let head = CombinedMarginHead::new(6, 32, 32.0, 2).unwrap();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let input = Tensor::randn(&[6, 1, 64, 100], 1.0, &mut rng);
    let labels = vec![0usize, 1, 2, 3, 4, 5];

    // warmup
    for _ in 0..3 {
        let mut tape = Tape::new();
        let fwd = model.forward_embeddings(&mut tape, &input).unwrap();
        let wv = tape.leaf(head.weight.clone(), true).unwrap();
        let lv = tape.combined_margin_loss(fwd.embeddings, wv, &labels, 32.0, 0.1, 0.05).unwrap();
        tape.backward(lv).unwrap();
    }
    let t0 = Instant::now();
    let n = 20;
    for _ in 0..n {
        let mut tape = Tape::new();
        let fwd = model.forward_embeddings(&mut tape, &input).unwrap();
        let _ = fwd;
    }
    let fwd_time = t0.elapsed().as_secs_f64() / n as f64;
    let t1 = Instant::now();
    for _ in 0..n {
        let mut tape = Tape::new();
        let fwd = model.forward_embeddings(&mut tape, &input).unwrap();
        let wv = tape.leaf(head.weight.clone(), true).unwrap();
        let lv = tape.combined_margin_loss(fwd.embeddings, wv, &labels, 32.0, 0.1, 0.05).unwrap();
        tape.backward(lv).unwrap();
    }
    let full_time = t1.elapsed().as_secs_f64() / n as f64;
    println!("forward only: {:.1} ms, forward+backward: {:.1} ms", fwd_time * 1e3, full_time * 1e3);
    println!("threads: {}", rayon::current_num_threads());
}
