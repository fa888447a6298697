//! Temporary diagnostic probe (not part of the suite).

use artifix::artifacts::{load_manifest, ArtifactClass};
use artifix::diffusion::ConditionalEpsilon;
use artifix::imageio::load_image_png;
use artifix::metrics::{compare, to_unit_range};
use artifix::restorer::{
    destandardize, restore, restore_core, standardize, RestoreMode,
};
use artifix::rng::derive_rng;
use artifix::schedule::NoiseSchedule;
use ndarray::ArrayD;
use std::path::Path;

struct CopyCond {
    schedule: NoiseSchedule,
}

impl ConditionalEpsilon for CopyCond {
    fn epsilon(
        &self,
        x: &ArrayD<f64>,
        y_t: &ArrayD<f64>,
        t: usize,
        _c: ArtifactClass,
    ) -> ArrayD<f64> {
        // Optimal prediction if the clean latent were exactly the
        // conditioning latent: eps = (y_t - sqrt(ab) x) / sqrt(1-ab).
        let ab = self.schedule.alpha_bar(t);
        if ab >= 1.0 {
            return ArrayD::zeros(y_t.raw_dim());
        }
        let mut out = y_t.clone();
        out.zip_mut_with(x, |o, &m| *o = (*o - ab.sqrt() * m) / (1.0 - ab).sqrt());
        out
    }
}

#[test]
#[ignore]
fn probe_oracle_round_trip_var() {
    use artifix::diffusion::{ddim_generate, ddim_invert, oracle::GaussianData};
    use artifix::schedule::make_linear_schedule;
    let s = make_linear_schedule(1000, 1e-4, 2e-2).unwrap();
    let mut rng = derive_rng(5, "probe/oracle", 0);
    for var in [0.0, 1e-8, 1e-6, 1e-4, 1e-2, 0.0625, 0.25, 1.0] {
        let mu = artifix::rng::standard_normal(&mut rng, &[4, 8, 8]);
        let data = GaussianData { mu: mu.clone(), var };
        let z = artifix::rng::standard_normal(&mut rng, &[4, 8, 8]);
        let x0 = &mu + &z.mapv(|v| v * var.sqrt());
        let model = |y: &ArrayD<f64>, t: usize| data.epsilon_star(&s, y, t);
        for n in [50usize, 100, 200] {
            let lat = ddim_invert(&model, &s, &x0, 1000, n).unwrap();
            let back = ddim_generate(&model, &s, &lat, 1000, n).unwrap();
            let rms = (back
                .iter()
                .zip(x0.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / x0.len() as f64)
                .sqrt();
            println!("var {var:.4} n {n:3}: round-trip rms {rms:.3e}");
        }
    }
}

#[test]
#[ignore]
fn probe_restore_path() {
    let root = Path::new("/tmp/calib");
    let vq = artifix::cli::load_vqae(&root.join("ae.ckpt")).unwrap();
    let model =
        artifix::cli::load_restorer(&Path::new("/tmp/probe-c").join("restorer.ckpt")).unwrap();

    let manifest = root.join("dataset-test/manifest.jsonl");
    let (_, records) = load_manifest(&manifest).unwrap();

    let mut ceil = vec![];
    let mut base = vec![];
    for r in records.iter().take(8) {
        let clean = load_image_png(root.join("dataset-test").join(&r.clean)).unwrap();
        let artifact = load_image_png(root.join("dataset-test").join(&r.artifact)).unwrap();
        let recon = vq.decode(&vq.encode(&clean).unwrap()).unwrap();
        ceil.push(compare(&to_unit_range(&clean), &to_unit_range(&recon)).unwrap().psnr);
        base.push(compare(&to_unit_range(&clean), &to_unit_range(&artifact)).unwrap().psnr);
    }
    println!("AE ceiling psnr: {ceil:.1?}");
    println!("baseline   psnr: {base:.1?}");

    // Oracle-conditional restore through the same standardize/ladder/decode
    // path as restore().
    let oracle = CopyCond {
        schedule: model.schedule().clone(),
    };
    let stats = model.latent_stats();
    let mut orc = vec![];
    for r in records.iter().take(8) {
        let clean = load_image_png(root.join("dataset-test").join(&r.clean)).unwrap();
        let artifact = load_image_png(root.join("dataset-test").join(&r.artifact)).unwrap();
        let z_x = standardize(&vq.encode(&artifact).unwrap(), &stats);
        let mut rng = derive_rng(7, "restore/noise", 0);
        let (y0, _) = restore_core(
            &oracle,
            model.schedule(),
            &z_x,
            &RestoreMode::Blind,
            30,
            &mut rng,
        )
        .unwrap();
        let restored = vq.decode(&destandardize(&y0, &stats)).unwrap();
        orc.push(compare(&to_unit_range(&clean), &to_unit_range(&restored)).unwrap().psnr);
    }
    println!("oracle-restore psnr: {orc:.1?}");

    // Real model at 30 and 200 DDIM steps.
    let mut real30 = vec![];
    let mut real200 = vec![];
    for r in records.iter().take(4) {
        let clean = load_image_png(root.join("dataset-test").join(&r.clean)).unwrap();
        let artifact = load_image_png(root.join("dataset-test").join(&r.artifact)).unwrap();
        let a = restore(&model, &vq, &artifact, &RestoreMode::Blind, 30, 7).unwrap();
        let b = restore(&model, &vq, &artifact, &RestoreMode::Blind, 200, 7).unwrap();
        real30.push(compare(&to_unit_range(&clean), &to_unit_range(&a)).unwrap().psnr);
        real200.push(compare(&to_unit_range(&clean), &to_unit_range(&b)).unwrap().psnr);
    }
    println!("real 30-step  psnr: {real30:.1?}");
    println!("real 200-step psnr: {real200:.1?}");

    // Trajectory: walk the ladder manually with the real model and print
    // the running sample RMS plus the implied x0 RMS at each rung.
    use artifix::diffusion::{ddim_reverse_step, predict_x0, step_ladder};
    let r = &records[1];
    let artifact = load_image_png(root.join("dataset-test").join(&r.artifact)).unwrap();
    let z_x = standardize(&vq.encode(&artifact).unwrap(), &stats);
    let s = model.schedule();
    let ladder = step_ladder(s.t_count(), 30);
    let mut rng = derive_rng(7, "restore/noise", 0);
    let mut y = artifix::rng::standard_normal(&mut rng, z_x.shape());
    let rms = |a: &ArrayD<f64>| (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
    println!("cond z_x rms: {:.3}", rms(&z_x));
    for i in (1..ladder.len()).rev() {
        let (t, t_prev) = (ladder[i], ladder[i - 1]);
        let eps = ConditionalEpsilon::epsilon(&model, &z_x, &y, t, ArtifactClass::Mask);
        let x0 = predict_x0(s, &y, &eps, t).unwrap();
        y = ddim_reverse_step(s, &y, &eps, t, t_prev).unwrap();
        if i % 5 == 0 || i <= 3 {
            println!(
                "t {t:4} -> {t_prev:4}: eps_rms {:.3} x0_rms {:.3} y_rms {:.3}",
                rms(&eps),
                rms(&x0),
                rms(&y)
            );
        }
    }

    // Clamped-x0 sampling: identical ladder, but bound the predicted clean
    // latent before re-noising. Tests whether stabilizing the first rungs
    // rescues sample quality with the current weights.
    for clamp in [1.5f64, 3.0] {
        let mut by_mode = vec![];
        for r in records.iter().take(8) {
            let clean = load_image_png(root.join("dataset-test").join(&r.clean)).unwrap();
            let artifact = load_image_png(root.join("dataset-test").join(&r.artifact)).unwrap();
            let z_x = standardize(&vq.encode(&artifact).unwrap(), &stats);
            let mut rng = derive_rng(7, "restore/noise", 0);
            let mut y = artifix::rng::standard_normal(&mut rng, z_x.shape());
            let ladder = step_ladder(s.t_count(), 30);
            for i in (1..ladder.len()).rev() {
                let (t, t_prev) = (ladder[i], ladder[i - 1]);
                let eps = ConditionalEpsilon::epsilon(&model, &z_x, &y, t, r.label);
                let mut x0 = predict_x0(s, &y, &eps, t).unwrap();
                x0.mapv_inplace(|v| v.clamp(-clamp, clamp));
                let ab = s.alpha_bar(t_prev);
                let mut next = x0.mapv(|v| v * ab.sqrt());
                next.zip_mut_with(&eps, |o, &e| *o += (1.0 - ab).sqrt() * e);
                y = next;
            }
            let restored = vq.decode(&destandardize(&y, &stats)).unwrap();
            by_mode
                .push(compare(&to_unit_range(&clean), &to_unit_range(&restored)).unwrap().psnr);
        }
        println!("clamp +-{clamp} nonblind psnr: {by_mode:.1?}");
    }

    // Where does the training loss actually sit across t? Evaluate the
    // fixed-batch loss at a few timesteps on training-style inputs.
    let (_, train_records) = load_manifest(&root.join("dataset-train/manifest.jsonl")).unwrap();
    let mut clean_z = vec![];
    let mut art_z = vec![];
    for r in train_records.iter().take(8) {
        let c = load_image_png(root.join("dataset-train").join(&r.clean)).unwrap();
        let a = load_image_png(root.join("dataset-train").join(&r.artifact)).unwrap();
        clean_z.push(standardize(&vq.encode(&c).unwrap(), &stats));
        art_z.push(standardize(&vq.encode(&a).unwrap(), &stats));
    }
    let d = clean_z[0].shape()[0];
    let (h, w) = (clean_z[0].shape()[1], clean_z[0].shape()[2]);
    let bsz = clean_z.len();
    for &t in &[25usize, 100, 300, 500, 700, 900, 1000] {
        let mut rng = derive_rng(11, "probe/loss", t as u64);
        let mut input = ArrayD::zeros(ndarray::IxDyn(&[bsz, 2 * d, h, w]));
        let mut target = ArrayD::zeros(ndarray::IxDyn(&[bsz, d, h, w]));
        for b in 0..bsz {
            let eps = artifix::rng::standard_normal(&mut rng, &[d, h, w]);
            let ab = s.alpha_bar(t);
            for c in 0..d {
                for i in 0..h {
                    for j in 0..w {
                        input[[b, c, i, j]] = art_z[b][[c, i, j]];
                        input[[b, d + c, i, j]] = ab.sqrt() * clean_z[b][[c, i, j]]
                            + (1.0 - ab).sqrt() * eps[[c, i, j]];
                        target[[b, c, i, j]] = eps[[c, i, j]];
                    }
                }
            }
        }
        let ts = vec![t; bsz];
        let classes = vec![ArtifactClass::Mask.index(); bsz];
        let pred = model.epsilon_batch(&input, &ts, Some(&classes));
        let loss = (&pred - &target).mapv(|v| v * v).mean().unwrap();
        println!("loss at t={t:4}: {loss:.4}");
    }
}
