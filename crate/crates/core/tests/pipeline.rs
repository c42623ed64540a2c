use nted::kernel::{extract, materialize_deformation, nted, distribute, FeatureMap, Projection, SemanticFilters};
use nted::renderer::{evaluate, Checkpoint, Renderer, RendererConfig, TrainConfig, TrainSample, Trainer};
use nted::spatial::Grid;
use nted::synth::{generate_pair, generate_split, SynthConfig};
use nted::{ppm, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> RendererConfig {
    RendererConfig {
        resolution: 16,
        scales: vec![4, 8],
        semantics: vec![2, 4],
        channels: vec![6, 4],
        output_channels: 3,
        ..RendererConfig::default()
    }
}

fn small_samples(n: u64, cfg: &RendererConfig) -> Vec<TrainSample<f64>> {
    let synth = SynthConfig {
        canvas: cfg.resolution,
        ..SynthConfig::default()
    };
    (0..n)
        .map(|s| TrainSample::from_pair(&generate_pair(s, &synth), cfg).unwrap())
        .collect()
}

#[test]
fn resume_through_json_is_bit_identical() {
    let renderer = Renderer::new(small_config()).unwrap();
    let samples = small_samples(4, renderer.config());
    let batch: Vec<_> = samples.iter().collect();
    let train = TrainConfig {
        batch_size: 2,
        ..TrainConfig::default()
    };
    let mut a: Trainer<f64> = Trainer::new(renderer.clone(), train, 5).unwrap();
    a.train_step(&batch[..2]).unwrap();
    let text = serde_json::to_string(&a.checkpoint()).unwrap();
    let ckpt: Checkpoint = serde_json::from_str(&text).unwrap();
    let mut b: Trainer<f64> = Trainer::from_checkpoint(ckpt.renderer().unwrap(), &ckpt).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.ema, b.ema);
    let sa = a.train_step(&batch[2..]).unwrap();
    let sb = b.train_step(&batch[2..]).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(a.params, b.params);
    assert_eq!(a.steps_taken(), 2);
}

#[test]
fn checkpoint_rejects_a_different_config() {
    let renderer = Renderer::new(small_config()).unwrap();
    let t: Trainer<f64> = Trainer::new(renderer, TrainConfig::default(), 0).unwrap();
    let ckpt = t.checkpoint();
    let other = Renderer::new(RendererConfig {
        filter_gain: 2.0,
        ..small_config()
    })
    .unwrap();
    assert!(ckpt.verify(&other).is_err());
    assert!(Trainer::<f64>::from_checkpoint(other, &ckpt).is_err());
}

#[test]
fn evaluation_reports_identity_baseline() {
    let renderer = Renderer::new(small_config()).unwrap();
    let samples = small_samples(3, renderer.config());
    let params = renderer.init_params::<f64>(2);
    let m = evaluate(&renderer, &params, &samples).unwrap();
    let identity: f64 = samples
        .iter()
        .map(|s| {
            let d = s.reference.data().iter().zip(s.target.data()).map(|(a, b)| (a - b).abs());
            d.sum::<f64>() / s.target.len() as f64
        })
        .sum::<f64>()
        / 3.0;
    assert_eq!(m.samples, 3);
    assert!((m.identity_l1 - identity).abs() < 1e-12);
    assert!(m.pixel_l1.is_finite() && m.attn_l1.is_finite());
}

#[test]
fn split_is_reproducible_and_disjoint() {
    let cfg = SynthConfig::default();
    let a = generate_split(20, 5, 9, &cfg).unwrap();
    let b = generate_split(20, 5, 9, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.test_seeds.iter().all(|s| !a.train_seeds.contains(s)));
    let p: nted::synth::Pair = a.pair(a.train_seeds[0]);
    let q: nted::synth::Pair = a.pair(a.train_seeds[0]);
    assert_eq!(p.target.image, q.target.image);
}

#[test]
fn sprite_images_survive_ppm_round_trip() {
    let pair = generate_pair::<f64>(4, &SynthConfig::default());
    let grid = pair.reference.spec.grid();
    let (back, g) = ppm::decode(&ppm::encode(&pair.reference.image, grid).unwrap()).unwrap();
    assert_eq!(g, grid);
    for (a, b) in pair.reference.image.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// The factored operation agrees with the explicit deformation matrix on
    /// non-square grids of different sizes.
    #[test]
    fn factored_warp_matches_dense_deformation(
        seed in any::<u64>(),
        hr in 1usize..6, wr in 1usize..6,
        ht in 1usize..6, wt in 1usize..6,
        k in 1usize..6, c in 1usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gr, gt) = (Grid::new(hr, wr), Grid::new(ht, wt));
        let reference = FeatureMap::new(gr, random(&mut rng, &[gr.positions(), c], 2.0)).unwrap();
        let target = FeatureMap::new(gt, random(&mut rng, &[gt.positions(), c], 2.0)).unwrap();
        let we = SemanticFilters::new(random(&mut rng, &[k, c], 1.5)).unwrap();
        let wd = SemanticFilters::new(random(&mut rng, &[k, c], 1.5)).unwrap();
        let proj = Projection::new(random(&mut rng, &[c, c], 1.0), Some(random(&mut rng, &[1, c], 1.0))).unwrap();

        let out = nted(&reference, &target, &we, &wd, &proj).unwrap();
        let (_, ce) = extract(&reference, &we, &proj).unwrap();
        let (textures, _) = extract(&reference, &we, &proj).unwrap();
        let (_, cd) = distribute(&target, &wd, &textures).unwrap();
        let dense = materialize_deformation(&ce, &cd).unwrap();
        prop_assert!(dense.max_row_sum_error() < 1e-12);
        let direct = dense.apply(proj.apply(&reference).unwrap().values()).unwrap();
        prop_assert_eq!(out.grid(), gt);
        for (a, b) in out.values().data().iter().zip(direct.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
