// temporary pilot experiment; deleted before release
use stainforge::metrics::{dscsi, DscsiConfig};
use stainforge::color::ViewingConditions;
use stainforge::models::{ClassifierConfig, DiscriminatorConfig, GeneratorConfig};
use stainforge::synth::{generate_paired_dataset, load_patch, StainProfile, Split, SynthOptions};
use stainforge::trainer::*;

#[test]
#[ignore]
fn pilot() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = std::time::Instant::now();
    let opts = SynthOptions {
        n_per_class: 100,
        seed: 7,
        patch_size: 64,
        train_frac: 0.8,
        val_frac: 0.1,
    };
    let manifest = generate_paired_dataset(
        &opts,
        &StainProfile::default_a(),
        &StainProfile::default_b(),
        dir.path(),
    )
    .unwrap();
    println!("synth: {:?}", t0.elapsed());

    let clf_cfg = ClassifierConfig::default();
    let t0 = std::time::Instant::now();
    let (clf, clf_log) =
        train_classifier(&manifest, "a", &clf_cfg, &TrainConfig::classifier_defaults(7)).unwrap();
    println!(
        "classifier: {:?} ({} steps, first loss {:.4}, last loss {:.4})",
        t0.elapsed(),
        clf_log.len(),
        clf_log.first().unwrap().total,
        clf_log.last().unwrap().total
    );
    let rep_a = evaluate_classifier(&clf_cfg, &clf, &manifest, Split::Test, "a", None).unwrap();
    let rep_b = evaluate_classifier(&clf_cfg, &clf, &manifest, Split::Test, "b", None).unwrap();
    println!("clf AUC on A: {:.4}, raw B: {:.4}", rep_a.auc, rep_b.auc);

    let nets = GanNets {
        gen_cfg: GeneratorConfig::default(),
        disc_cfg: DiscriminatorConfig::default(),
        clf_cfg: clf_cfg.clone(),
    };
    let ms = MetricSettings::default();
    for reco in [RecoKind::Ssim, RecoKind::Dscsi] {
        let t0 = std::time::Instant::now();
        let cfg = TrainConfig::gan_defaults(7, reco);
        let out = train_gan(&manifest, "a", &nets, &clf, &cfg, &ms).unwrap();
        let n = out.log.len();
        let ma = |r: std::ops::Range<usize>| {
            let s: f64 = out.log[r.clone()].iter().map(|x| x.reco).sum();
            s / r.len() as f64
        };
        println!(
            "{:?}-GAN: {:?} for {} steps; reco MA first50 {:.4} -> last50 {:.4}; d_loss last {:.4}; kl last {:.5}",
            reco,
            t0.elapsed(),
            n,
            ma(0..50.min(n)),
            ma(n.saturating_sub(50)..n),
            out.log.last().unwrap().d_loss,
            out.log.last().unwrap().kl,
        );

        // style transfer margin on test pairs
        let pairs = manifest.paired(Split::Test, "a", "b");
        let cfg_d = DscsiConfig::default();
        let vc = ViewingConditions::default();
        let mut raw = 0.0;
        let mut fixed = 0.0;
        let bs: Vec<_> = pairs.iter().map(|(_, pb, _)| load_patch(pb).unwrap()).collect();
        let gs = normalize_patches(&nets.gen_cfg, &out.generator, &bs).unwrap();
        for (i, (pa, _, _)) in pairs.iter().enumerate() {
            let a = load_patch(pa).unwrap();
            raw += dscsi(&bs[i], &a, &cfg_d, &vc).unwrap().value();
            fixed += dscsi(&gs[i], &a, &cfg_d, &vc).unwrap().value();
        }
        raw /= pairs.len() as f64;
        fixed /= pairs.len() as f64;
        println!("  DSCSI raw B vs A: {:.4}; normalized B vs A: {:.4}; margin {:+.4}", raw, fixed, fixed - raw);

        let rep_nb = evaluate_classifier(
            &clf_cfg, &clf, &manifest, Split::Test, "b",
            Some((&nets.gen_cfg, &out.generator)),
        )
        .unwrap();
        println!("  clf AUC on normalized B: {:.4} (A was {:.4})", rep_nb.auc, rep_a.auc);
    }
}
