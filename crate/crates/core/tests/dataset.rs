use mot::config::RunConfig;
use mot::scene::{build_dataset, generate_scenario, Dataset, Renderer, SYNC_K};

fn build(n: usize, fraction: f64, seed: u64) -> Dataset {
    let cfg = RunConfig::desk();
    build_dataset(n, fraction, seed, &cfg.dataset_header(), &cfg.synth_config()).unwrap()
}

#[test]
fn sync_only_and_async_only() {
    assert!(build(5, 0.0, 1).samples.iter().all(|s| s.k == SYNC_K));
    let data = build(52, 1.0, 2);
    let n = data.samples.len() as f64;
    assert!(n >= 1000.0, "{n}");
    assert!(data.samples.iter().all(|s| s.k == 4 || s.k == 5));
    let k4 = data.samples.iter().filter(|s| s.k == 4).count() as f64;
    assert!((k4 - n / 2.0).abs() <= 3.0 * (n / 4.0).sqrt(), "{k4} of {n}");
}

#[test]
fn history_frames_are_consecutive_renders() {
    let cfg = RunConfig::desk();
    let header = cfg.dataset_header();
    let data = build(3, 0.5, 3);
    let renderer = Renderer::new(header.render_seed, header.width, header.rgb_tokens, header.bev_tokens);
    let dt = 1.0 / header.rate_hz;
    for s in &data.samples {
        let sc = generate_scenario(s.scenario_seed, &cfg.synth_config()).unwrap();
        for offset in 0..=header.stale_frames {
            let hist = s.history(header.stale_frames, header.history_frames, offset);
            for (i, frame) in hist.iter().enumerate() {
                let want = renderer.render_rgb(&sc, (s.t + i - offset) as f64 * dt);
                assert_eq!(*frame, want, "sample at t={} offset {offset} frame {i}", s.t);
            }
        }
        assert_eq!(s.current_rgb, renderer.render(&sc, (s.t + s.k) as f64 * dt).0);
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let a = build(8, 0.5, 4);
    let b = build(8, 0.5, 4);
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(a.manifest(), b.manifest());
    assert_ne!(a.digest().unwrap(), build(8, 0.5, 5).digest().unwrap());
}

#[test]
fn file_round_trip_and_compatibility() {
    let cfg = RunConfig::desk();
    let data = build(2, 0.5, 6);
    let path = std::env::temp_dir().join(format!("mot-data-{}.bin", std::process::id()));
    data.write(&path).unwrap();
    let back = Dataset::read(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(back, data);
    assert!(back.check_compatible(&cfg).is_ok());
    assert!(back.check_compatible(&cfg.with_overrides(&["bev_tokens=4"]).unwrap()).is_err());
}

// Multinomial logistic regression on the current-frame tokens, fit by plain gradient descent.
#[test]
fn linear_probe_reads_the_longitudinal_label() {
    let data = build(60, 0.0, 7);
    let featurize = |s: &mot::scene::Sample| -> Vec<f64> {
        let mut f: Vec<f64> = s.current_rgb.data().iter().chain(s.current_bev.data()).map(|&v| v as f64).collect();
        f.push(1.0);
        f
    };
    let xs: Vec<Vec<f64>> = data.samples.iter().map(featurize).collect();
    let ys: Vec<usize> = data.samples.iter().map(|s| s.labels.longitudinal[0] as usize).collect();
    let split = xs.len() * 4 / 5;
    let (dim, classes) = (xs[0].len(), 4);
    let mut w = vec![vec![0.0; dim]; classes];
    let predict = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        let z: Vec<f64> = w.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    };
    for _ in 0..300 {
        let mut g = vec![vec![0.0; dim]; classes];
        for (x, &y) in xs[..split].iter().zip(&ys[..split]) {
            let p = predict(&w, x);
            for c in 0..classes {
                let d = p[c] - f64::from(u8::from(c == y));
                for (gi, xi) in g[c].iter_mut().zip(x) {
                    *gi += d * xi;
                }
            }
        }
        for c in 0..classes {
            for (wi, gi) in w[c].iter_mut().zip(&g[c]) {
                *wi -= 0.5 * gi / split as f64;
            }
        }
    }
    let correct = xs[split..]
        .iter()
        .zip(&ys[split..])
        .filter(|(x, &y)| {
            let p = predict(&w, x);
            (0..classes).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap() == y
        })
        .count();
    let acc = correct as f64 / (xs.len() - split) as f64;
    assert!(acc >= 0.95, "probe accuracy {acc}");
}
