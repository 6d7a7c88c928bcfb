use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::local_attention;
use crate::tensor::gradcheck::{self, GradCheckOptions};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize<M: Module<f64>>(m: &mut M, seed: u64, scale: f64) {
    let mut s = seed;
    m.visit_mut("", &mut |_, t| {
        s += 1;
        *t = random(t.shape(), s).scale(scale);
    });
}

fn tiny_block_config() -> ModelConfig {
    ModelConfig {
        stem_width: 8,
        stages: vec![
            StageConfig { depth: 1, width: 8, heads: 2 },
            StageConfig { depth: 1, width: 16, heads: 2 },
            StageConfig { depth: 1, width: 32, heads: 2 },
        ],
        window: 2,
        global_tokens: 2,
        ..ModelConfig::reduced()
    }
}

// ---- config -------------------------------------------------------------

#[test]
fn named_variants_reproduce_the_architecture_table() {
    let rows = |c: &ModelConfig| -> Vec<(usize, usize, usize)> {
        c.stages.iter().map(|s| (s.depth, s.width, s.heads)).collect()
    };
    let t = ModelConfig::variant("T").unwrap();
    assert_eq!((t.stem_width, t.global_tokens, t.window), (64, 8, 7));
    assert_eq!(rows(&t), [(2, 64, 2), (6, 128, 4), (6, 256, 8)]);
    let s = ModelConfig::variant("s").unwrap();
    assert_eq!((s.stem_width, s.global_tokens, s.window), (96, 16, 7));
    assert_eq!(rows(&s), [(2, 96, 3), (6, 192, 6), (6, 384, 12)]);
    let b = ModelConfig::variant("lightvit-b").unwrap();
    assert_eq!((b.stem_width, b.global_tokens, b.window), (128, 24, 7));
    assert_eq!(rows(&b), [(3, 128, 4), (8, 256, 8), (6, 512, 16)]);
    for c in [t, s, b] {
        c.validate().unwrap();
        assert_eq!(c.reduction, 4);
    }
}

#[test]
fn unknown_variant_lists_valid_names() {
    let err = ModelConfig::variant("XL").unwrap_err().to_string();
    assert!(err.contains("T, S, B"), "{err}");
}

#[test]
fn invalid_config_lists_every_violation() {
    let mut c = ModelConfig::tiny();
    c.stages[1].heads = 5;
    c.stages[2].width = 300;
    let err = c.validate().unwrap_err().to_string();
    assert!(err.contains("heads 5 do not divide width 128"), "{err}");
    assert!(err.contains("not twice"), "{err}");
    assert!(Model::<f32>::build(&c, 0).is_err());
}

#[test]
fn toggles_without_any_attention_path_are_rejected() {
    let mut c = ModelConfig::reduced();
    c.toggles.local = false;
    c.global_tokens = 0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

#[test]
fn config_text_roundtrips() {
    let mut c = ModelConfig::small();
    c.toggles.spatial = false;
    let back = ModelConfig::from_toml(&c.canonical_text()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.canonical_text(), c.canonical_text());
}

#[test]
fn resolution_rules() {
    let t = ModelConfig::tiny();
    t.check_resolution(224, 224).unwrap();
    t.check_resolution(448, 448).unwrap();
    let err = t.check_resolution(256, 256).unwrap_err().to_string();
    assert!(err.contains("32×32") && err.contains("S=7"), "{err}");
    assert!(t.check_resolution(100, 224).is_err());
}

// ---- stem ---------------------------------------------------------------

#[test]
fn stem_reduces_by_eight() {
    let mut init = Initializer::new(0);
    let stem: Stem<f32> = Stem::new(&mut init, 16).unwrap();
    let img = Tensor::<f32>::zeros(&[3, 64, 64]).unwrap();
    assert_eq!(stem.forward(&img).unwrap().shape(), [8, 8, 16]);
    let img = Tensor::<f32>::zeros(&[3, 224, 224]).unwrap();
    assert_eq!(stem.forward(&img).unwrap().shape(), [28, 28, 16]);
    assert!(matches!(
        stem.forward(&Tensor::<f32>::zeros(&[3, 20, 16]).unwrap()),
        Err(Error::Config(_))
    ));
}

#[test]
fn zero_image_with_zero_biases_gives_zero_tokens() {
    let mut init = Initializer::new(1);
    let stem: Stem<f64> = Stem::new(&mut init, 8).unwrap();
    let out = stem.forward(&Tensor::zeros(&[3, 16, 16]).unwrap()).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

// ---- block --------------------------------------------------------------

#[test]
fn local_only_block_is_a_plain_windowed_block() {
    let mut cfg = tiny_block_config();
    cfg.global_tokens = 0;
    cfg.toggles = Toggles { local: true, global: true, spatial: false, channel: false };
    let mut block = Block::new(&mut Initializer::new(2), &cfg, 0).unwrap();
    randomize(&mut block, 3, 0.5);
    let x = random(&[4, 4, 8], 4);
    let (y, g) = lightvit_block(&x, &GlobalTokens::none(), &block, 2, cfg.toggles).unwrap();
    assert_eq!(g.count(), 0);
    let x1 = x.add(&local_attention(&block.norm.forward(&x).unwrap(), &block.attn, 2).unwrap()).unwrap();
    let flat = x1.reshape(&[16, 8]).unwrap();
    let f = &block.ffn;
    let want = flat
        .add(&f.fc2.forward(&f.fc1.forward(&f.norm.forward(&flat).unwrap()).unwrap().gelu()).unwrap())
        .unwrap()
        .reshape(&[4, 4, 8])
        .unwrap();
    assert!(y.bit_eq(&want));
}

#[test]
fn block_preserves_shapes() {
    let cfg = tiny_block_config();
    let block = Block::<f64>::new(&mut Initializer::new(5), &cfg, 0).unwrap();
    let g = GlobalTokens::new(random(&[2, 8], 6)).unwrap();
    let x = random(&[4, 6, 8], 7);
    let (y, g1) = lightvit_block(&x, &g, &block, 2, cfg.toggles).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert_eq!(g1.tensor().unwrap().shape(), [2, 8]);
}

#[test]
fn global_tokens_pass_through_when_global_path_is_off() {
    let mut cfg = tiny_block_config();
    cfg.toggles.global = false;
    let block = Block::<f64>::new(&mut Initializer::new(8), &cfg, 0).unwrap();
    let g = GlobalTokens::new(random(&[2, 8], 9)).unwrap();
    let (_, g1) = lightvit_block(&random(&[4, 4, 8], 10), &g, &block, 2, cfg.toggles).unwrap();
    assert!(g1.tensor().unwrap().bit_eq(g.tensor().unwrap()));
}

#[test]
fn block_gradients_match_finite_differences() {
    let cfg = tiny_block_config();
    let mut block = Block::new(&mut Initializer::new(11), &cfg, 0).unwrap();
    randomize(&mut block, 12, 0.5);
    let wx = random(&[4, 4, 8], 13);
    let wg = random(&[2, 8], 14);
    let mut inputs = vec![random(&[4, 4, 8], 15), random(&[2, 8], 16)];
    block.visit("", &mut |_, t| inputs.push(t.clone()));
    let reports = gradcheck::check(
        &inputs,
        |v| {
            let mut b = block.clone();
            let mut i = 2;
            b.visit_mut("", &mut |_, t| {
                *t = v[i].clone();
                i += 1;
            });
            let (y, g) = lightvit_block(&v[0], &GlobalTokens::new(v[1].clone())?, &b, 2, cfg.toggles)?;
            // Mean reduction keeps roundoff below the relative-error floor on the
            // key bias, whose gradient is exactly zero (softmax shift invariance).
            let total = y.mul(&wx)?.sum().add(&g.tensor().unwrap().mul(&wg)?.sum())?;
            Ok(total.scale(1.0 / 144.0))
        },
        GradCheckOptions { max_coords: Some(24), ..Default::default() },
    )
    .unwrap();
    assert!(gradcheck::worst(&reports) < gradcheck::DEFAULT_TOLERANCE, "{reports:?}");
}

// ---- patch merging ------------------------------------------------------

fn merging(dim: usize, seed: u64) -> PatchMerging<f64> {
    let mut p = PatchMerging::new(&mut Initializer::new(seed), dim).unwrap();
    randomize(&mut p, seed, 1.0);
    p
}

#[test]
fn merging_is_the_exact_sum_of_branches() {
    let p = merging(3, 20);
    let x = random(&[4, 6, 3], 21);
    let y = residual_patch_merging(&x, &p).unwrap();
    let want = p.main_branch(&x).unwrap().add(&p.residual_branch(&x).unwrap()).unwrap();
    assert!(y.bit_eq(&want));
    assert_eq!(y.shape(), [2, 3, 6]);
}

#[test]
fn zeroed_main_branch_leaves_the_residual() {
    let mut p = merging(2, 22);
    p.main = Linear::zeros(8, 4, false).unwrap();
    let x = random(&[2, 2, 2], 23);
    let y = residual_patch_merging(&x, &p).unwrap();
    assert_eq!(y.shape(), [1, 1, 4]);
    assert!(y.bit_eq(&p.residual_branch(&x).unwrap()));
}

#[test]
fn merging_matches_scalar_reference() {
    let c = 2;
    let p = merging(c, 24);
    let x = random(&[4, 4, c], 25);
    let at = |i: usize, j: usize, k: usize| x.data()[(i * 4 + j) * c + k];
    let y = residual_patch_merging(&x, &p).unwrap();
    let wm = p.main.weight.data();
    let wr = p.residual.weight.data();
    for i in 0..2 {
        for j in 0..2 {
            // neighbours in (row, col) order (0,0), (1,0), (0,1), (1,1)
            let mut cat = Vec::new();
            for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                cat.extend((0..c).map(|k| at(2 * i + di, 2 * j + dj, k)));
            }
            let m = cat.iter().sum::<f64>() / cat.len() as f64;
            let var = cat.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / cat.len() as f64;
            let normed: Vec<f64> = cat
                .iter()
                .enumerate()
                .map(|(q, v)| (v - m) / (var + 1e-5).sqrt() * p.norm.gamma.data()[q] + p.norm.beta.data()[q])
                .collect();
            let pooled: Vec<f64> = (0..c)
                .map(|k| (at(2 * i, 2 * j, k) + at(2 * i + 1, 2 * j, k) + at(2 * i, 2 * j + 1, k) + at(2 * i + 1, 2 * j + 1, k)) / 4.0)
                .collect();
            for o in 0..2 * c {
                let main: f64 = (0..4 * c).map(|q| normed[q] * wm[q * 2 * c + o]).sum();
                let res: f64 = (0..c).map(|q| pooled[q] * wr[q * 2 * c + o]).sum();
                let got = y.data()[(i * 2 + j) * 2 * c + o];
                assert!((got - main - res).abs() < 1e-12, "{got} vs {}", main + res);
            }
        }
    }
}

#[test]
fn merging_rejects_odd_grids() {
    let p = merging(2, 26);
    assert!(matches!(residual_patch_merging(&random(&[3, 4, 2], 0), &p), Err(Error::Config(_))));
}

// ---- global token projection --------------------------------------------

#[test]
fn identity_block_projection_duplicates_tokens() {
    let c = 3;
    let mut w = vec![0.0; c * 2 * c];
    for i in 0..c {
        w[i * 2 * c + i] = 1.0;
        w[i * 2 * c + c + i] = 1.0;
    }
    let proj = Linear { weight: Tensor::from_vec(&[c, 2 * c], w).unwrap(), bias: None };
    let g = random(&[2, c], 30);
    let out = project_global_tokens(&GlobalTokens::new(g.clone()).unwrap(), &proj).unwrap();
    let t = out.tensor().unwrap();
    for r in 0..2 {
        for k in 0..c {
            assert_eq!(t.data()[r * 2 * c + k], g.data()[r * c + k]);
            assert_eq!(t.data()[r * 2 * c + c + k], g.data()[r * c + k]);
        }
    }
    let zero = project_global_tokens(&GlobalTokens::new(g).unwrap(), &Linear::zeros(c, 2 * c, false).unwrap()).unwrap();
    assert!(zero.tensor().unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn variant_t_first_boundary_projects_to_128() {
    let model = Model::<f32>::build(&ModelConfig::tiny(), 0).unwrap();
    let proj = model.stages[1].global_proj.as_ref().unwrap();
    let g = model.initial_global_tokens().unwrap();
    assert_eq!(g.tensor().unwrap().shape(), [8, 64]);
    assert_eq!(project_global_tokens(&g, proj).unwrap().tensor().unwrap().shape(), [8, 128]);
}

// ---- whole model ----------------------------------------------------------

#[test]
fn same_seed_builds_are_bitwise_identical() {
    let a = Model::<f32>::build(&ModelConfig::reduced(), 7).unwrap();
    let b = Model::<f32>::build(&ModelConfig::reduced(), 7).unwrap();
    let c = Model::<f32>::build(&ModelConfig::reduced(), 8).unwrap();
    let (pa, pb, pc) = (a.named_parameters(), b.named_parameters(), c.named_parameters());
    assert!(pa.iter().zip(&pb).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb)));
    assert!(pa.iter().zip(&pc).any(|((_, ta), (_, tc))| !ta.bit_eq(tc)));
}

#[test]
fn parameter_names_are_unique() {
    let m = Model::<f32>::build(&ModelConfig::reduced(), 0).unwrap();
    let mut names: Vec<String> = m.named_parameters().into_iter().map(|(n, _)| n).collect();
    let total = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), total);
    assert!(names.contains(&"stages.1.blocks.0.attn.query.weight".to_string()));
    assert!(names.contains(&"global_tokens".to_string()));
}

#[test]
fn fresh_gate_layers_and_biases_are_zero() {
    let m = Model::<f32>::build(&ModelConfig::reduced(), 0).unwrap();
    for (name, t) in m.named_parameters() {
        if name.ends_with("bias") || name.contains("_select") || name.ends_with("beta") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
        if name.ends_with("weight") && !name.contains("_select") {
            assert!(t.data().iter().all(|&v| v.abs() <= 0.04), "{name}");
        }
    }
}

#[test]
fn reduced_model_feature_pyramid() {
    let m = Model::<f64>::build(&ModelConfig::reduced(), 1).unwrap();
    let out = m.forward_features(&random(&[3, 32, 32], 2)).unwrap();
    let shapes: Vec<Vec<usize>> = out.features.iter().map(|f| f.shape().to_vec()).collect();
    assert_eq!(shapes, [vec![4, 4, 8], vec![2, 2, 16], vec![1, 1, 32]]);
    assert_eq!(out.global.tensor().unwrap().shape(), [2, 32]);
}

#[test]
fn forward_is_deterministic() {
    let m = Model::<f32>::build(&ModelConfig::reduced(), 3).unwrap();
    let img = random(&[3, 32, 32], 4).cast::<f32>();
    let a = m.forward_features(&img).unwrap();
    let b = m.forward_features(&img).unwrap();
    assert!(a.features.iter().zip(&b.features).all(|(x, y)| x.bit_eq(y)));
}

#[test]
fn zero_tokens_equal_global_path_off() {
    let mut zero = ModelConfig::reduced();
    zero.global_tokens = 0;
    let mut off = ModelConfig::reduced();
    off.toggles.global = false;
    let a = Model::<f64>::build(&zero, 5).unwrap();
    let b = Model::<f64>::build(&off, 5).unwrap();
    assert!(a.global_tokens.is_none() && b.global_tokens.is_none());
    let img = random(&[3, 32, 32], 6);
    assert!(a.classify(&img).unwrap().bit_eq(&b.classify(&img).unwrap()));
}

#[test]
fn classifier_outputs() {
    let mut m = Model::<f64>::build(&ModelConfig::reduced(), 9).unwrap();
    let img = random(&[3, 32, 32], 10);
    let logits = m.classify(&img).unwrap();
    assert_eq!(logits.shape(), [10]);
    let total: f64 = logits.softmax(0).unwrap().data().iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
    m.head.fc = Linear::zeros(32, 10, true).unwrap();
    assert!(m.classify(&img).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn default_config_has_a_thousand_classes() {
    assert_eq!(ModelConfig::tiny().num_classes, 1000);
    let m = Model::<f32>::build(&ModelConfig::tiny(), 0).unwrap();
    let feat = Tensor::<f32>::zeros(&[7, 7, 256]).unwrap();
    assert_eq!(m.head_forward(&feat).unwrap().shape(), [1000]);
}

#[test]
fn bad_resolution_is_reported_before_running() {
    let m = Model::<f32>::build(&ModelConfig::reduced(), 0).unwrap();
    assert!(matches!(m.forward_features(&Tensor::zeros(&[3, 48, 32]).unwrap()), Err(Error::Config(_))));
    assert!(matches!(m.forward_features(&Tensor::zeros(&[1, 32, 32]).unwrap()), Err(Error::Dimension(_))));
}

#[test]
fn local_only_model_has_no_global_parameters() {
    let mut c = ModelConfig::reduced();
    c.toggles.global = false;
    let m = Model::<f32>::build(&c, 0).unwrap();
    assert!(m
        .named_parameters()
        .iter()
        .all(|(n, _)| !n.contains("global")));
}

#[test]
fn reduced_model_gradients_match_finite_differences() {
    let mut m = Model::<f64>::build(&ModelConfig::reduced(), 40).unwrap();
    randomize(&mut m, 41, 0.3);
    let w = random(&[10], 42);
    let mut inputs = vec![random(&[3, 32, 32], 43)];
    m.visit("", &mut |_, t| inputs.push(t.clone()));
    let reports = gradcheck::check(
        &inputs,
        |v| {
            let mut q = m.clone();
            let mut i = 1;
            q.visit_mut("", &mut |_, t| {
                *t = v[i].clone();
                i += 1;
            });
            Ok(q.classify(&v[0])?.mul(&w)?.sum())
        },
        GradCheckOptions { max_coords: Some(4), ..Default::default() },
    )
    .unwrap();
    assert!(gradcheck::worst(&reports) < gradcheck::DEFAULT_TOLERANCE, "{reports:?}");
}

#[test]
fn stage_table_lists_each_stage() {
    let text = ModelConfig::tiny().stage_table();
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with('S')).collect();
    assert_eq!(rows.len(), 3);
    let fields: Vec<&str> = rows[1].split_whitespace().collect();
    assert_eq!(fields, ["S2", "stride=1/16", "B=6", "C=128", "H=4", "T=8"]);
}

#[test]
fn library_gradient_check_covers_every_tensor() {
    let cfg = ModelConfig::reduced();
    let opts = GradCheckOptions { max_coords: Some(2), ..Default::default() };
    let checks = gradient_check(&cfg, 32, 32, 7, 0.3, opts).unwrap();
    let model = Model::<f64>::build(&cfg, 7).unwrap();
    assert_eq!(checks.len(), model.named_parameters().len() + 1);
    assert_eq!(checks[0].name, "image");
    for c in &checks {
        assert!(c.report.max_rel_err < gradcheck::DEFAULT_TOLERANCE, "{}: {:?}", c.name, c.report);
    }
}
