mod common;

use nvk_core::autodiff::Tape;
use nvk_core::backbone::BackboneConfig;
use nvk_core::params::ParamStore;
use nvk_core::rng;
use nvk_core::tensor::Tensor;
use nvk_core::vim::VimConfig;
use nvk_core::vit::VitConfig;
use proptest::prelude::*;

fn cls_of(
    cfg: &BackboneConfig,
    params: &ParamStore,
    image: &Tensor,
) -> (Vec<f32>, Option<Vec<Tensor>>) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let out = cfg.forward(&mut tape, &bound, image).unwrap();
    (tape.data(out.cls).to_vec(), out.attention)
}

/// Moves patch `perm[k]` of `image` to grid slot `k`.
fn permute_patches(image: &Tensor, patch: usize, perm: &[usize]) -> Tensor {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let gw = w / patch;
    let mut out = image.clone();
    for (k, &src) in perm.iter().enumerate() {
        let (ky, kx) = (k / gw * patch, k % gw * patch);
        let (sy, sx) = (src / gw * patch, src % gw * patch);
        for dy in 0..patch {
            for dx in 0..patch {
                for c in 0..3 {
                    out.set(&[ky + dy, kx + dx, c], image.at(&[sy + dy, sx + dx, c]));
                }
            }
        }
    }
    assert_eq!((h % patch, w % patch), (0, 0));
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn cls_is_invariant_to_joint_patch_and_position_permutation(seed in any::<u64>()) {
        let vc = VitConfig::tiny(16, 4, 16, 2, 2);
        let cfg = BackboneConfig::Vit(vc.clone());
        let mut r = rng::seeded(seed);
        let params = cfg.init(&mut r).unwrap();
        let image = Tensor::uniform(&[16, 16, 3], -1.0, 1.0, &mut r);
        let j = vc.num_patches();
        let mut perm: Vec<usize> = (0..j).collect();
        rng::shuffle(&mut r, &mut perm);

        let mut moved = params.clone();
        let pos = params.get("vit.pos").unwrap();
        let d = vc.embed_dim;
        let dst = moved.get_mut("vit.pos").unwrap().data_mut();
        for (k, &src) in perm.iter().enumerate() {
            dst[(1 + k) * d..(2 + k) * d].copy_from_slice(&pos.data()[(1 + src) * d..(2 + src) * d]);
        }
        let (a, _) = cls_of(&cfg, &params, &image);
        let (b, _) = cls_of(&cfg, &moved, &permute_patches(&image, 4, &perm));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), scale in 0.1f32..30.0) {
        let cfg = BackboneConfig::Vit(VitConfig::tiny(16, 4, 16, 3, 4));
        let mut r = rng::seeded(seed);
        let mut params = cfg.init(&mut r).unwrap();
        // sharpen attention by inflating the projections
        for v in params.get_mut("vit.layer0.wqkv").unwrap().data_mut() {
            *v *= scale;
        }
        let image = Tensor::uniform(&[16, 16, 3], -1.0, 1.0, &mut r);
        let (_, attn) = cls_of(&cfg, &params, &image);
        for a in attn.unwrap() {
            let n = a.shape()[2];
            for row in a.data().chunks(n) {
                let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn vit_patch_projection_gradient_matches_differences() {
    let cfg = BackboneConfig::Vit(VitConfig::tiny(16, 8, 16, 1, 2));
    let mut r = rng::seeded(3);
    let params = cfg.init(&mut r).unwrap();
    let image = Tensor::uniform(&[16, 16, 3], -1.0, 1.0, &mut r);
    let w = Tensor::uniform(&[16], -1.0, 1.0, &mut r);
    let loss = common::cls_probe_loss(&cfg, &image, &w);
    let only_proj = params.subset("vit.patch_proj");
    let rest = params.clone();
    let (worst, checked) = common::grad_check(
        &only_proj,
        |tape, bound| {
            let mut full = rest.bind(&mut *tape, false);
            full.merge(bound.clone());
            loss(tape, &full)
        },
        64,
        1e-2,
        &mut r,
    );
    assert_eq!(checked, 64);
    assert!(worst.rel <= 1e-2, "{worst:?}");
}

#[test]
fn vim_gradients_match_differences() {
    let cfg = BackboneConfig::Vim(VimConfig::tiny(16, 8, 16, 1, 4));
    let mut r = rng::seeded(4);
    let params = cfg.init(&mut r).unwrap();
    let image = Tensor::uniform(&[16, 16, 3], -1.0, 1.0, &mut r);
    let w = Tensor::uniform(&[16], -1.0, 1.0, &mut r);
    let (worst, _) = common::grad_check(
        &params,
        common::cls_probe_loss(&cfg, &image, &w),
        4,
        1e-2,
        &mut r,
    );
    assert!(worst.rel <= 1e-2, "{worst:?}");
}

#[test]
fn checkpoint_names_follow_the_layer_scheme() {
    let vit = BackboneConfig::Vit(VitConfig::tiny(16, 8, 16, 2, 2))
        .init(&mut rng::seeded(0))
        .unwrap();
    for part in ["wqkv", "wmsa", "mlp1", "mlp2", "norm1", "norm2"] {
        assert!(vit.contains(&format!("vit.layer1.{part}")), "{part}");
    }
    for part in ["patch_proj", "pos", "cls"] {
        assert!(vit.contains(&format!("vit.{part}")));
    }
    let vim = BackboneConfig::Vim(VimConfig::tiny(16, 8, 16, 2, 4))
        .init(&mut rng::seeded(0))
        .unwrap();
    for part in ["a_log", "dproj", "bproj", "cproj"] {
        for dir in ["fwd", "bwd"] {
            assert!(
                vim.contains(&format!("vim.layer0.{part}.{dir}")),
                "{part}.{dir}"
            );
        }
    }
    for part in ["in", "out", "norm"] {
        assert!(vim.contains(&format!("vim.layer1.{part}")), "{part}");
    }
}
