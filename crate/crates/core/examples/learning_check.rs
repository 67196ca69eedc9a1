//! Trains on a synthetic split and prints held-out metrics with and without
//! line tokens.
//!
//! `cargo run --release --example learning_check -- [train_n] [val_n] [epochs] [lr] [batch] [augment 0|1] [max_grad_norm] [out suffix] [WxH]`

use planeformer::harness::{evaluate, train, EvalOptions, ModelPredictor, TrainConfig, TrainOptions};
use planeformer::scene::{generate_scene, scene_seed, GeneratorConfig};

fn main() {
    env_logger_init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let n_train: usize = arg(0, "500").parse().unwrap();
    let n_val: usize = arg(1, "50").parse().unwrap();
    let cfg = TrainConfig {
        epochs: arg(2, "60").parse().unwrap(),
        lr: arg(3, "1e-4").parse().unwrap(),
        batch_size: arg(4, "8").parse().unwrap(),
        augment: arg(5, "0") == "1",
        max_grad_norm: arg(6, "0").parse().unwrap(),
        ..TrainConfig::default()
    };
    let size: Vec<usize> = arg(8, "64x48").split('x').map(|v| v.parse().unwrap()).collect();
    let g = GeneratorConfig::default().with_size(size[0], size[1]);
    let train_set: Vec<_> = (0..n_train as u64).map(|i| generate_scene(scene_seed(1, i), &g).unwrap()).collect();
    let val: Vec<_> = (0..n_val as u64).map(|i| generate_scene(scene_seed(2, i), &g).unwrap()).collect();
    let out = std::env::temp_dir().join(format!("learning_check{}", arg(7, "")));
    let t = std::time::Instant::now();
    let res = train(
        &cfg,
        &train_set,
        &TrainOptions {
            out: out.clone(),
            validation: Some(val.clone()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    println!("trained in {:.0}s", t.elapsed().as_secs_f64());
    for lines in [true, false] {
        let r = evaluate(&ModelPredictor::new(&res.model, lines), &val, &EvalOptions::default()).unwrap();
        let s = r.summary;
        println!(
            "lines={lines} recall@0.6 {:.3} pixel {:.3} VI {:.3} RI {:.3} SC {:.3} normal@30 {:.3}",
            s.plane_recall_at_depth(0.6),
            s.depth_curve.pixel_recall[12],
            s.vi,
            s.ri,
            s.sc,
            s.normal_curve.plane_recall[1]
        );
    }
}

fn env_logger_init() {
    struct L;
    impl log::Log for L {
        fn enabled(&self, _: &log::Metadata) -> bool {
            true
        }
        fn log(&self, r: &log::Record) {
            eprintln!("{}", r.args());
        }
        fn flush(&self) {}
    }
    log::set_logger(&L).ok();
    log::set_max_level(log::LevelFilter::Info);
}
