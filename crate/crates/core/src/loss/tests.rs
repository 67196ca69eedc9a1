use super::*;
use crate::autograd::Tape;
use crate::model::{ForwardOptions, ModelConfig, ModelInput, PlaneFormer};
use crate::scene::{generate_scene, scene_seed, GeneratorConfig, Layout};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn small_scene(seed: u64, max_planes: usize) -> PlanarScene {
    let cfg = GeneratorConfig {
        max_planes,
        image_noise: 0.0,
        ..GeneratorConfig::default().with_size(64, 48)
    };
    generate_scene(seed, &cfg).unwrap().downsample(2).unwrap()
}

fn frontal(distance: f64) -> PlanarScene {
    let cfg = GeneratorConfig {
        layout: Layout::Frontal { distance },
        image_noise: 0.0,
        ..GeneratorConfig::default().with_size(64, 48)
    };
    generate_scene(0, &cfg).unwrap()
}

fn targets(s: &PlanarScene, k: usize) -> SceneTargets {
    SceneTargets::new(s, k, 512, 0).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Analytic gradient of `f` at `inputs` against central differences with
/// step 1e-4, as one relative error over all coordinates.
fn gradient_error(inputs: &[Tensor], f: impl for<'t> Fn(&[Var<'t>]) -> Var<'t>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&vars);
    let grads = tape.backward(y);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let h = 1e-4;
    for (k, input) in inputs.iter().enumerate() {
        let g = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == k {
                            t.data_mut()[i] += delta;
                        }
                        tape.leaf(t)
                    })
                    .collect();
                f(&vars).item()
            };
            analytic.push(g.data()[i]);
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
    }
    rel_err(&analytic, &numeric)
}

fn random(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let d = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect())
}

fn identity_sigma(k: usize) -> Vec<usize> {
    (0..k).collect()
}

#[test]
fn classification_examples() {
    let tape = Tape::new();
    let slots = pad_ground_truth(&[PlaneParam([0.0, 0.0, 1.0])], &[[0.5, 0.5]], 4).unwrap();
    // slot 0 is a plane (class 0); the rest are non-plane (class 1)
    let perfect = tape.constant(Tensor::from_rows(&[
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![0.0, 1.0],
        vec![0.0, 1.0],
    ]));
    assert_eq!(classification_loss(perfect, &identity_sigma(4), &slots).item(), 0.0);
    let e = (-1f64).exp();
    let one_off = tape.constant(Tensor::from_rows(&[
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![1.0 - e, e],
        vec![0.0, 1.0],
    ]));
    let v = classification_loss(one_off, &identity_sigma(4), &slots).item();
    assert!((v - 0.25).abs() < 1e-15);
    // zero probability is floored, not infinite
    let zero = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0]]));
    let v = classification_loss(zero, &identity_sigma(4), &slots).item();
    assert!((v - (-(1e-12f64).ln() / 4.0)).abs() < 1e-12);
}

#[test]
fn param_loss_examples() {
    let s = frontal(2.0);
    let t = targets(&s, 4);
    let cfg = LossConfig::default();
    let tape = Tape::new();
    let exact = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.5], vec![9.0; 3], vec![9.0; 3], vec![9.0; 3]]));
    assert!(plane_param_loss(exact, &identity_sigma(4), &t, &cfg).item().abs() < 1e-12);
    // doubled parameter: L1 = |n̂|₁ = 0.5, cosine term 0, points β2 · 1
    let doubled = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0, 1.0], vec![9.0; 3], vec![9.0; 3], vec![9.0; 3]]));
    let v = plane_param_loss(doubled, &identity_sigma(4), &t, &cfg).item();
    assert!((v - 2.5).abs() < 1e-12, "{v}");
    // zero-norm prediction stays finite
    let zero = tape.constant(Tensor::zeros([4, 3]));
    assert!(plane_param_loss(zero, &identity_sigma(4), &t, &cfg).item().is_finite());
}

#[test]
fn plane_points_are_capped_and_seeded() {
    let s = frontal(2.0);
    let a = SceneTargets::new(&s, 4, 100, 1).unwrap();
    let b = SceneTargets::new(&s, 4, 100, 1).unwrap();
    let c = SceneTargets::new(&s, 4, 100, 2).unwrap();
    assert_eq!(a.plane_points[0].cols(), 100);
    assert_eq!(a.plane_points, b.plane_points);
    assert_ne!(a.plane_points, c.plane_points);
}

#[test]
fn embedding_examples() {
    let s = small_scene(3, 4);
    let t = targets(&s, 4);
    let m = t.num_planes();
    assert!(m >= 2);
    let cfg = LossConfig::default();
    let tape = Tape::new();
    let eps = 8;
    let n = s.pixel_count();
    // instance i at (2i, 0, ...); pixels carry their plane's embedding
    let inst: Vec<f64> = (0..4).flat_map(|i| (0..eps).map(move |c| if c == 0 { 2.0 * i as f64 } else { 0.0 })).collect();
    let mut map = vec![0.0; eps * n];
    for (p, &label) in s.mask.iter().enumerate() {
        if label > 0 {
            map[p] = 2.0 * (label - 1) as f64;
        }
    }
    let embeds = tape.constant(Tensor::new([4, eps], inst));
    let map = tape.constant(Tensor::new([eps, n], map));
    let (pull, push) = embedding_loss(embeds, map, &identity_sigma(4), &t, &cfg);
    assert_eq!(pull.item(), 0.0);
    assert_eq!(push.item(), 0.0);

    // two real planes at distance exactly δ2: no push; at distance 0: δ2 per ordered pair
    let two = SceneTargets {
        planes: t.planes[..2].to_vec(),
        centers: t.centers[..2].to_vec(),
        plane_pixels: t.plane_pixels[..2].to_vec(),
        plane_points: t.plane_points[..2].to_vec(),
        slots: pad_ground_truth(&t.planes[..2], &t.centers[..2], 4).unwrap(),
        ..t.clone()
    };
    let at = |d: f64| {
        let mut e = vec![0.0; 4 * eps];
        e[eps] = d;
        tape.constant(Tensor::new([4, eps], e))
    };
    let (_, push) = embedding_loss(at(1.5), map, &identity_sigma(4), &two, &cfg);
    assert_eq!(push.item(), 0.0);
    let (_, push) = embedding_loss(at(0.0), map, &identity_sigma(4), &two, &cfg);
    assert!((push.item() - 1.5).abs() < 1e-15);
    let sum_cfg = LossConfig {
        normalization: LossNormalization::Sum,
        ..cfg
    };
    let (_, push) = embedding_loss(at(0.0), map, &identity_sigma(4), &two, &sum_cfg);
    assert!((push.item() - 3.0).abs() < 1e-15);
}

#[test]
fn depth_and_center_examples() {
    let s = frontal(2.0);
    let t = targets(&s, 4);
    let cfg = LossConfig::default();
    let tape = Tape::new();
    let n = s.pixel_count();
    let exact = tape.constant(Tensor::new([1, n], s.depth.clone()));
    assert_eq!(depth_loss(exact, &t, &cfg).unwrap().item(), 0.0);
    let shifted = tape.constant(Tensor::new([1, n], s.depth.iter().map(|z| z + 0.1).collect()));
    assert!((depth_loss(shifted, &t, &cfg).unwrap().item() - 0.1).abs() < 1e-12);

    let mut no_depth = t.clone();
    no_depth.depth.iter_mut().for_each(|z| *z = f64::NAN);
    assert!(depth_loss(exact, &no_depth, &cfg).is_none());

    let half = tape.constant(Tensor::full([2, n], 0.5));
    assert!(center_pixel_loss(half, &t, &cfg).item() < 0.02);
    let mut exact_c = vec![0.0; 2 * n];
    exact_c[..n].fill(t.centers[0][0]);
    exact_c[n..].fill(t.centers[0][1]);
    let exact_c = tape.constant(Tensor::new([2, n], exact_c));
    assert_eq!(center_pixel_loss(exact_c, &t, &cfg).item(), 0.0);
}

#[test]
fn gated_terms_vanish_without_planes() {
    let s = frontal(2.0);
    let mut t = targets(&s, 4);
    t.planes.clear();
    t.centers.clear();
    t.plane_pixels.clear();
    t.plane_points.clear();
    t.slots = pad_ground_truth(&[], &[], 4).unwrap();
    let cfg = LossConfig::default();
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = tape.leaf(random(&[4, 3], 1.0, &mut rng));
    let centers = tape.leaf(random(&[4, 2], 1.0, &mut rng));
    let embeds = tape.leaf(random(&[4, 8], 1.0, &mut rng));
    let map = tape.leaf(random(&[8, s.pixel_count()], 1.0, &mut rng));
    let sigma = identity_sigma(4);
    assert_eq!(plane_param_loss(params, &sigma, &t, &cfg).item(), 0.0);
    assert_eq!(center_instance_loss(centers, &sigma, &t, &cfg).item(), 0.0);
    let (pull, push) = embedding_loss(embeds, map, &sigma, &t, &cfg);
    assert_eq!((pull.item(), push.item()), (0.0, 0.0));
}

/// Ground-truth predictions on a tape: probabilities exactly 0/1, true
/// parameters and centers, well separated embeddings, exact pixel maps.
fn truth<'t>(tape: &'t Tape, s: &PlanarScene, t: &SceneTargets, k: usize) -> (Prediction<'t>, [Var<'t>; 3]) {
    let m = t.num_planes();
    let eps = 8;
    let n = s.pixel_count();
    let probs: Vec<f64> = (0..k).flat_map(|i| if i < m { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
    let params: Vec<f64> = (0..k).flat_map(|i| if i < m { t.planes[i].0 } else { [0.0; 3] }).collect();
    let centers: Vec<f64> = (0..k).flat_map(|i| if i < m { t.centers[i] } else { [0.0; 2] }).collect();
    let embeds: Vec<f64> = (0..k).flat_map(|i| (0..eps).map(move |c| if c == i % eps { 2.0 * (1 + i / eps) as f64 } else { 0.0 })).collect();
    let mut map = vec![0.0; eps * n];
    let mut cmap = vec![0.5; 2 * n];
    for (p, &label) in s.mask.iter().enumerate() {
        if label > 0 {
            let i = label as usize - 1;
            for c in 0..eps {
                map[c * n + p] = embeds[i * eps + c];
            }
            cmap[p] = t.centers[i][0];
            cmap[n + p] = t.centers[i][1];
        }
    }
    let probs = tape.constant(Tensor::new([k, 2], probs));
    let pred = Prediction {
        logits: probs,
        probs,
        params: tape.constant(Tensor::new([k, 3], params)),
        centers: Some(tape.constant(Tensor::new([k, 2], centers))),
        embeds: tape.constant(Tensor::new([k, eps], embeds)),
    };
    let maps = [
        tape.constant(Tensor::new([eps, n], map)),
        tape.constant(Tensor::new([1, n], s.depth.clone())),
        tape.constant(Tensor::new([2, n], cmap)),
    ];
    (pred, maps)
}

#[test]
fn losses_vanish_at_truth() {
    let cfg = GeneratorConfig {
        image_noise: 0.0,
        ..GeneratorConfig::default().with_size(64, 48)
    };
    let lc = LossConfig::default();
    for i in 0..20 {
        let s = generate_scene(scene_seed(3, i), &cfg).unwrap();
        let t = targets(&s, 20);
        let tape = Tape::new();
        let (pred, [map, depth, cmap]) = truth(&tape, &s, &t, 20);
        let m = match_prediction(&pred, &t, &lc).unwrap();
        let (pull, push) = embedding_loss(pred.embeds, map, &m.sigma, &t, &lc);
        let values = [
            classification_loss(pred.probs, &m.sigma, &t.slots).item(),
            plane_param_loss(pred.params, &m.sigma, &t, &lc).item(),
            center_instance_loss(pred.centers.unwrap(), &m.sigma, &t, &lc).item(),
            pull.item(),
            push.item(),
            depth_loss(depth, &t, &lc).unwrap().item(),
            center_pixel_loss(cmap, &t, &lc).item(),
        ];
        for v in values {
            assert!(v.abs() < 1e-8, "scene {i}: {values:?}");
        }
    }
}

#[test]
fn loss_is_invariant_to_prediction_order() {
    let s = small_scene(4, 4);
    let t = targets(&s, 6);
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(&[6, 2], 1.0, &mut rng);
    let params = random(&[6, 3], 0.3, &mut rng);
    let centers = random(&[6, 2], 0.3, &mut rng);
    let embeds = random(&[6, 8], 1.0, &mut rng);
    let map = random(&[8, s.pixel_count()], 1.0, &mut rng);
    let eval = |perm: &[usize]| {
        let tape = Tape::new();
        let c = |t: &Tensor| tape.constant(t.clone()).gather_rows(perm.to_vec());
        let logits = c(&logits);
        let pred = Prediction {
            logits,
            probs: logits.softmax_rows(),
            params: c(&params),
            centers: Some(c(&centers)),
            embeds: c(&embeds),
        };
        let m = match_prediction(&pred, &t, &cfg).unwrap();
        let (pull, push) = embedding_loss(pred.embeds, tape.constant(map.clone()), &m.sigma, &t, &cfg);
        let v = [
            classification_loss(pred.probs, &m.sigma, &t.slots).item(),
            plane_param_loss(pred.params, &m.sigma, &t, &cfg).item(),
            center_instance_loss(pred.centers.unwrap(), &m.sigma, &t, &cfg).item(),
            pull.item(),
            push.item(),
        ];
        (v, m.sigma)
    };
    let id: Vec<usize> = (0..6).collect();
    let perm = vec![3, 0, 5, 1, 4, 2];
    let (a, sa) = eval(&id);
    let (b, sb) = eval(&perm);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
    }
    // prediction j of the permuted set is prediction perm[j] of the original
    for i in 0..6 {
        assert_eq!(perm[sb[i]], sa[i]);
    }
}

#[test]
fn component_gradients_match_finite_differences() {
    let s = small_scene(6, 4);
    assert_eq!((s.width, s.height), (32, 24));
    let t = targets(&s, 4);
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = s.pixel_count();
    let sigma = vec![2, 0, 3, 1];
    let gt: Vec<f64> = (0..4).flat_map(|i| t.planes.get(i).map_or([0.1; 3], |p| p.0)).collect();
    let near_gt = Tensor::new([4, 3], gt.iter().map(|v| v + rng.random_range(-0.2..0.2)).collect());
    let checks: Vec<(&str, f64)> = vec![
        (
            "cls",
            gradient_error(&[random(&[4, 2], 1.0, &mut rng)], |v| {
                classification_loss(v[0].softmax_rows(), &sigma, &t.slots)
            }),
        ),
        ("param", gradient_error(&[near_gt], |v| plane_param_loss(v[0], &sigma, &t, &cfg))),
        (
            "center_inst",
            gradient_error(&[random(&[4, 2], 0.5, &mut rng)], |v| center_instance_loss(v[0], &sigma, &t, &cfg)),
        ),
        (
            "pull",
            gradient_error(&[random(&[4, 8], 0.5, &mut rng), random(&[8, n], 0.5, &mut rng)], |v| {
                embedding_loss(v[0], v[1], &sigma, &t, &cfg).0
            }),
        ),
        (
            "push",
            gradient_error(&[random(&[4, 8], 0.4, &mut rng), random(&[8, n], 0.5, &mut rng)], |v| {
                embedding_loss(v[0], v[1], &sigma, &t, &cfg).1
            }),
        ),
        (
            "depth",
            gradient_error(&[Tensor::new([1, n], s.depth.iter().map(|z| z + rng.random_range(-0.5..0.5)).collect())], |v| {
                depth_loss(v[0], &t, &cfg).unwrap()
            }),
        ),
        (
            "center_pix",
            gradient_error(&[random(&[2, n], 0.5, &mut rng)], |v| center_pixel_loss(v[0], &t, &cfg)),
        ),
    ];
    for (name, err) in checks {
        assert!(err < 1e-3, "{name}: relative error {err}");
    }
}

/// Loss of a tiny model on one scene as a function of its parameters.
fn model_loss(model: &PlaneFormer, s: &PlanarScene, t: &SceneTargets, cfg: &LossConfig) -> f64 {
    let tape = Tape::new();
    let img = s.image_chw();
    let out = model
        .forward(&tape, &ModelInput::from_scene(s, &img), ForwardOptions::train())
        .unwrap();
    scene_loss(&out, t, cfg).unwrap().total.item()
}

#[test]
fn total_gradient_matches_finite_differences() {
    let cfg = GeneratorConfig {
        max_planes: 4,
        ..GeneratorConfig::default().with_size(64, 64)
    };
    let s = generate_scene(12, &cfg).unwrap().downsample(2).unwrap();
    let mut model = PlaneFormer::new(ModelConfig::tiny(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // zero biases leave some ReLU inputs exactly on the kink; move off it
    let biases: Vec<String> = model.params.names().filter(|n| n.ends_with(".b")).map(str::to_string).collect();
    for name in biases {
        for v in model.params.get_mut(&name).unwrap().data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let lc = LossConfig::default();
    let t = targets(&s, 4);

    let tape = Tape::new();
    let img = s.image_chw();
    let out = model
        .forward(&tape, &ModelInput::from_scene(&s, &img), ForwardOptions::train())
        .unwrap();
    let loss = scene_loss(&out, &t, &lc).unwrap();
    let grads = tape.backward(loss.total);
    let named: Vec<(String, Tensor)> = grads.named().into_iter().map(|(n, g)| (n.to_string(), g.clone())).collect();
    drop(grads);
    drop(out);
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-4;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for (name, g) in &named {
        for _ in 0..2 {
            let i = rng.random_range(0..g.len());
            let orig = model.params.get(name).unwrap().data()[i];
            model.params.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = model_loss(&model, &s, &t, &lc);
            model.params.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = model_loss(&model, &s, &t, &lc);
            model.params.get_mut(name).unwrap().data_mut()[i] = orig;
            let mid = model_loss(&model, &s, &t, &lc);
            // a ReLU switching inside the step makes the one-sided slopes disagree
            let (fwd, bwd) = ((up - mid) / h, (mid - down) / h);
            if (fwd - bwd).abs() > 1e-3 * (fwd.abs() + bwd.abs()) + 1e-6 {
                skipped += 1;
                continue;
            }
            analytic.push(g.data()[i]);
            numeric.push((up - down) / (2.0 * h));
        }
    }
    assert!(skipped * 10 <= analytic.len() + skipped, "{skipped} coordinates on a kink");
    let err = rel_err(&analytic, &numeric);
    assert!(err < 1e-3, "relative error {err}");
}
