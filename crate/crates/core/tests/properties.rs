use std::cell::Cell;

use candle_core::{DType, Device, Tensor};
use funedit_core::composer::{compose_move, edge_band, scaled_dilation_kernel, translate_object, EdgeMode, MoveRequest};
use funedit_core::diffusion::{make_schedule, sample, Conditioner, Guidance, SamplerConfig};
use funedit_core::metrics::{psnr, ssim, ssim_masked};
use funedit_core::model::params::Path;
use funedit_core::model::{apply_ca_mask, CrossAttention, DenoiseInput, NoisePredictor, ParamStore};
use funedit_core::synthgen::{generate_dataset, make_sample, TaskSelection};
use funedit_core::taskvocab::{build_vocab, encode_prompt, make_inference_prompt, make_training_prompt, Slot, TaskId, TaskPrompt};
use funedit_core::{Image, Mask};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn task_strategy() -> impl Strategy<Value = TaskId> {
    prop::sample::select(TaskId::ALL.to_vec())
}

fn vocab_strategy() -> impl Strategy<Value = Vec<TaskId>> {
    prop::sample::subsequence(TaskId::ALL.to_vec(), 1..=3).prop_shuffle()
}

fn rect(side: usize, x0: usize, y0: usize, w: usize, h: usize) -> Mask {
    Mask::from_fn(side, side, |x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h)
}

fn random_image(side: usize, seed: u64) -> Image {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(side, side, |_, _| [rng.random(), rng.random(), rng.random()]).quantized()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn training_prompt_has_k_slots_one_active(tasks in vocab_strategy(), pick in 0usize..3, seed: u64) {
        let (vocab, _) = build_vocab(&tasks, 8, 0).unwrap();
        let active = tasks[pick % tasks.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = make_training_prompt(&vocab, active, &mut rng).unwrap();
        prop_assert_eq!(p.len(), vocab.k());
        let actives: Vec<_> = p.active().collect();
        prop_assert_eq!(actives, vec![(active, 0)]);
    }

    #[test]
    fn inference_prompt_keeps_request_order(tasks in vocab_strategy(), n in 1usize..=3) {
        let (vocab, _) = build_vocab(&tasks, 8, 0).unwrap();
        let n = n.min(tasks.len());
        let requests: Vec<(TaskId, usize)> = tasks[..n].iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let p = make_inference_prompt(&vocab, &requests).unwrap();
        prop_assert_eq!(p.len(), vocab.k());
        prop_assert_eq!(p.active().collect::<Vec<_>>(), requests);
        prop_assert!(p.slots()[n..].iter().all(|s| *s == Slot::Skip));
    }

    #[test]
    fn encoding_commutes_with_permutation(perm in Just(vec![0usize, 1, 2]).prop_shuffle(), n in 1usize..=3, seed: u64) {
        let (vocab, table) = build_vocab(&TaskId::ALL, 16, seed).unwrap();
        let requests: Vec<(TaskId, usize)> = TaskId::ALL[..n].iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let p = make_inference_prompt(&vocab, &requests).unwrap();
        let rows: Vec<Vec<f32>> = encode_prompt(&p, &vocab, &table).unwrap().to_vec2().unwrap();
        let permuted: Vec<Vec<f32>> = encode_prompt(&p.permuted(&perm), &vocab, &table).unwrap().to_vec2().unwrap();
        for (i, &j) in perm.iter().enumerate() {
            prop_assert_eq!(&permuted[i], &rows[j]);
        }
    }

    #[test]
    fn atomic_samples_are_local_and_small(task in task_strategy(), seed in 0u64..1_000_000) {
        let s = make_sample(task, seed);
        let (w, h) = s.source.dims();
        prop_assert!(!s.mask.is_empty());
        prop_assert!(s.mask.count() * 2 < w * h);
        for y in 0..h {
            for x in 0..w {
                if !s.mask.get(x, y) {
                    prop_assert_eq!(s.source.pixel(x, y), s.target.pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn round_robin_is_balanced(n in 1usize..120, seed in 0u64..1000) {
        let data = generate_dataset(TaskSelection::All, n, seed);
        for t in TaskId::ALL {
            let c = data.iter().filter(|s| s.task == t).count() as f64;
            prop_assert!((c - n as f64 / 3.0).abs() <= 1.0);
        }
    }

    #[test]
    fn rectangles_survive_closing_and_opening(
        x0 in 6usize..20, y0 in 6usize..20, w in 5usize..20, h in 5usize..20, k in prop::sample::select(vec![3usize, 5])
    ) {
        let m = rect(48, x0, y0, w, h);
        prop_assert_eq!(m.dilate(k).unwrap().erode(k).unwrap(), m.clone());
        prop_assert_eq!(m.erode(k).unwrap().dilate(k).unwrap(), m);
    }

    #[test]
    fn morphology_is_extensive_and_ordered(bits in prop::collection::vec(any::<bool>(), 16 * 16), k in prop::sample::select(vec![1usize, 3, 5])) {
        // Kept off the border, where erosion treats the outside as empty.
        let m = Mask::from_fn(26, 26, |x, y| (5..21).contains(&x) && (5..21).contains(&y) && bits[(y - 5) * 16 + x - 5]);
        let d = m.dilate(k).unwrap();
        let e = m.erode(k).unwrap();
        prop_assert!(e.is_subset_of(&m));
        prop_assert!(m.is_subset_of(&d));
        prop_assert!(m.is_subset_of(&d.erode(k).unwrap()));
        prop_assert!(e.dilate(k).unwrap().is_subset_of(&m));
    }

    #[test]
    fn mask_png_round_trip(bits in prop::collection::vec(any::<bool>(), 1..300), w in 1usize..20) {
        let h = bits.len() / w;
        prop_assume!(h > 0);
        let m = Mask::from_raw(w, h, bits[..w * h].to_vec()).unwrap();
        prop_assert_eq!(Mask::from_png_bytes(&m.to_png_bytes().unwrap()).unwrap(), m.clone());
        prop_assert_eq!(Mask::from_base64_png(&m.to_base64_png().unwrap()).unwrap(), m);
    }

    #[test]
    fn ca_mask_keeps_inside_and_floors_outside(
        b in 1usize..3, heads in 1usize..5, q in 1usize..65, k in 1usize..5, seed: u64
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f32> = (0..b * heads * q * k).map(|_| rng.random_range(-4.0f32..4.0)).collect();
        let grid: Vec<u8> = (0..b * q * k).map(|_| rng.random_range(0u8..2)).collect();
        let st = Tensor::from_vec(scores.clone(), (b, heads, q, k), &Device::Cpu).unwrap();
        let gt = Tensor::from_vec(grid.clone(), (b, 1, q, k), &Device::Cpu).unwrap();
        let out: Vec<f32> = apply_ca_mask(&st, &gt).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for bi in 0..b {
            for h in 0..heads {
                let base = (bi * heads + h) * q * k;
                let min = scores[base..base + q * k].iter().copied().fold(f32::INFINITY, f32::min);
                for i in 0..q * k {
                    let expect = if grid[bi * q * k + i] == 1 { scores[base + i] } else { min };
                    prop_assert_eq!(out[base + i].to_bits(), expect.to_bits());
                }
            }
        }
    }

    #[test]
    fn movement_removal_avoids_destination(
        cx in 12usize..52, cy in 12usize..52, r in 3usize..8, dx in -30i64..30, dy in -30i64..30
    ) {
        let img = random_image(64, 1);
        let m = Mask::from_fn(64, 64, |x, y| {
            let (a, b) = (x as f64 - cx as f64, y as f64 - cy as f64);
            a * a + b * b <= (r * r) as f64
        });
        prop_assume!(dx != 0 || dy != 0);
        let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < 64 && y < 64;
        let kept = (0..64).flat_map(|y| (0..64).map(move |x| (x, y))).filter(|&(x, y)| m.get(x, y) && inside(x as i64 + dx, y as i64 + dy)).count();
        if kept == 0 {
            prop_assert!(translate_object(&img, &m, dx, dy).is_err());
            return Ok(());
        }
        let (moved, m_trg) = translate_object(&img, &m, dx, dy).unwrap();
        prop_assert_eq!(m_trg.count(), kept);
        for (x, y) in (0..64).flat_map(|y| (0..64).map(move |x| (x, y))) {
            if m_trg.get(x, y) {
                prop_assert_eq!(moved.pixel(x, y), img.pixel((x as i64 - dx) as usize, (y as i64 - dy) as usize));
            } else {
                prop_assert_eq!(moved.pixel(x, y), img.pixel(x, y));
            }
        }
        let edit = compose_move(&MoveRequest { image: img, src_mask: m, dx, dy }, scaled_dilation_kernel(64), EdgeMode::Band).unwrap();
        for op in &edit.ops {
            prop_assert!(!op.mask.is_empty());
            if op.task == TaskId::Removal {
                prop_assert!(op.mask.is_disjoint(&m_trg));
            }
        }
        prop_assert!(!edge_band(&m_trg).is_empty());
    }

    #[test]
    fn metrics_symmetric_and_blind_outside_region(seed in 0u64..10_000, x0 in 0usize..20, y0 in 0usize..20) {
        let a = random_image(24, seed);
        let b = random_image(24, seed + 1);
        let region = rect(24, x0, y0, 4, 4);
        prop_assert_eq!(psnr(&a, &b, Some(&region)).unwrap(), psnr(&b, &a, Some(&region)).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let fill = Image::filled(24, 24, [0.3, 0.6, 0.9]);
        let outside = region.not();
        let a2 = a.blend_masked(&fill, &outside).unwrap();
        let b2 = b.blend_masked(&fill, &outside).unwrap();
        prop_assert_eq!(psnr(&a, &b, Some(&region)).unwrap(), psnr(&a2, &b2, Some(&region)).unwrap());
        let big = rect(24, 2, 2, 20, 20);
        let s1 = ssim_masked(&a, &b, &big).unwrap();
        let far = big.dilate(7).unwrap().not();
        let s2 = ssim_masked(&a.blend_masked(&fill, &far).unwrap(), &b, &big).unwrap();
        prop_assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn linear_schedule_strictly_decreasing(t in 2usize..2000) {
        let s = make_schedule(t, "linear").unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for i in 1..=t {
            prop_assert!(s.alpha_bar(i) < s.alpha_bar(i - 1));
            prop_assert!(s.alpha_bar(i) > 0.0);
        }
    }
}

/// Predicts zero noise and counts its calls.
#[derive(Default)]
struct Counting(Cell<usize>);

impl NoisePredictor for Counting {
    fn predict(&self, input: &DenoiseInput<'_>) -> funedit_core::Result<Tensor> {
        self.0.set(self.0.get() + 1);
        Ok(input.z_t.zeros_like()?)
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn nfe_matches_predictor_calls(steps in 1usize..12, dual: bool, n_ops in 1usize..=3) {
        let (vocab, table) = build_vocab(&TaskId::ALL, 8, 0).unwrap();
        let cond = Conditioner { vocab: &vocab, table: &table, resolutions: &[8, 4], image_size: 16 };
        let schedule = make_schedule(1000, "linear").unwrap();
        let masks: Vec<Mask> = (0..n_ops).map(|i| rect(16, 2 * i, 2, 3, 3)).collect();
        let requests: Vec<(TaskId, usize)> = TaskId::ALL[..n_ops].iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let prompt = make_inference_prompt(&vocab, &requests).unwrap();
        let guidance = if dual { Guidance::Dual { s_img: 1.5, s_txt: 3.0 } } else { Guidance::Off };
        let cfg = SamplerConfig { steps, guidance, seed: 0 };
        let counter = Counting::default();
        let (_, nfe) = sample(&counter, &cond, &Image::filled(16, 16, [0.5; 3]), &prompt, &masks, &cfg, &schedule).unwrap();
        prop_assert_eq!(nfe, counter.0.get());
        prop_assert_eq!(nfe, steps * if dual { 3 } else { 1 });
    }
}

#[test]
fn all_skip_attention_is_query_independent() {
    let dev = Device::Cpu;
    let mut store = ParamStore::new(3, DType::F64, &dev);
    let attn = CrossAttention::new(&mut store, &Path::root("attn"), 16, 8, 4, 4).unwrap();
    let (vocab, table) = funedit_core::taskvocab::build_vocab_with(&TaskId::ALL, 8, 1, DType::F64, &dev).unwrap();
    let tokens = encode_prompt(&TaskPrompt::all_skip(&vocab), &vocab, &table).unwrap().unsqueeze(0).unwrap();
    let f1 = Tensor::randn(0f64, 1.0, (1, 10, 16), &dev).unwrap();
    let f2 = Tensor::randn(0f64, 1.0, (1, 10, 16), &dev).unwrap();
    let o1: Vec<Vec<f64>> = attn.attend(&f1, &tokens, None).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
    let o2: Vec<Vec<f64>> = attn.attend(&f2, &tokens, None).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
    for row in o1.iter().chain(&o2) {
        for (a, b) in row.iter().zip(&o1[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

