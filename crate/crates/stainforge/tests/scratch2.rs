// temporary classifier debug; deleted before release
use ndarray::Array3;
use stainforge::color::RgbPatch;
use stainforge::models::*;
use stainforge::synth::ClassLabel;
use stainforge::tape::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[test]
#[ignore]
fn classifier_learns_trivial_separation() {
    // bright patches = normal, dark = tumor
    let mk = |v: f64| RgbPatch::new(Array3::from_elem((32, 32, 3), v)).unwrap();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..32 {
        let dark = i % 2 == 0;
        images.push(mk(if dark { 0.3 } else { 0.8 }));
        labels.push(if dark { ClassLabel::Tumor } else { ClassLabel::Normal });
    }
    let cfg = ClassifierConfig::default();
    let mut params = classifier_init::<f32>(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
    let mut vel = HashMap::new();
    let to_planes = |p: &RgbPatch| -> Vec<f32> {
        let (h, w) = (p.height(), p.width());
        let mut out = vec![0.0f32; 3 * h * w];
        for c in 0..3 { for y in 0..h { for x in 0..w {
            out[(c * h + y) * w + x] = p.data()[[y, x, c]] as f32;
        }}}
        out
    };
    for step in 0..100 {
        let idx: Vec<usize> = (0..8).map(|k| (step * 8 + k) % 32).collect();
        let mut data = Vec::new();
        for &i in &idx { data.extend_from_slice(&to_planes(&images[i])); }
        let batch = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[8, 3, 32, 32]), data).unwrap();
        let tape = Tape::<f32>::new();
        let b = params.bind(&tape, false);
        let x = tape.leaf(batch);
        let out = classifier_forward(&cfg, &tape, &b, x);
        let mut mask = ndarray::ArrayD::zeros(ndarray::IxDyn(&[8, 2]));
        for (row, &i) in idx.iter().enumerate() {
            let col = if labels[i] == ClassLabel::Tumor { 1 } else { 0 };
            mask[[row, col]] = 1.0f32;
        }
        let mask = tape.leaf(mask);
        let picked = tape.mul(out.probs, mask);
        let p_true = tape.row_sum(picked);
        let p_safe = tape.add_const(p_true, 1e-12);
        let lp = tape.ln(p_safe);
        let nll = tape.mean_all(lp);
        let loss = tape.scale(nll, -1.0);
        let grads = tape.backward(loss);
        params.apply_sgd(&b, &grads, 1e-3, 0.0, &mut vel);
        if step % 20 == 0 || step == 99 {
            println!("step {step}: loss {:.5}", tape.scalar(loss));
        }
    }
    // score all
    let tape = Tape::<f32>::new();
    let b = params.bind(&tape, true);
    let mut data = Vec::new();
    for p in &images { data.extend_from_slice(&to_planes(p)); }
    let batch = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[32, 3, 32, 32]), data).unwrap();
    let x = tape.leaf(batch);
    let out = classifier_forward(&cfg, &tape, &b, x);
    let probs = tape.value(out.probs);
    let mut t_mean = 0.0; let mut n_mean = 0.0;
    for i in 0..32 {
        let s = probs[[i, 1]] as f64;
        if labels[i] == ClassLabel::Tumor { t_mean += s / 16.0 } else { n_mean += s / 16.0 }
    }
    println!("mean tumor score {t_mean:.4}, mean normal score {n_mean:.4}");
    assert!(t_mean > n_mean + 0.05, "classifier failed to separate trivially separable classes");
}
