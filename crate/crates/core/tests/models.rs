//! End-to-end behavior of the two model families.

use svt_core::config::{Reducer, ScheduleEntry};
use svt_core::layers;
use svt_core::mvit::MViT;
use svt_core::vit::{self, mhsa_block, ViT};
use svt_core::{presets, Bound, CoreError, ParamSet};
use svt_tensor::{DArray, Tape};
use svt_testkit::cases;

fn clip(shape: &[usize], seed: u64) -> DArray {
    DArray::randn(shape, 1.0, &mut cases::rng(seed))
}

fn logits(model: &ViT, params: &ParamSet, video: &DArray) -> DArray {
    let tape = Tape::new();
    let out = model.forward(&tape, &params.bind(&tape), video).unwrap();
    let v = tape.value(out.logits).clone();
    v
}

#[test]
fn empty_schedule_is_the_plain_stack() {
    let model = ViT::new(presets::tiny()).unwrap();
    let params = model.init_params(11).unwrap();
    let video = clip(&model.cfg.input, 12);
    let got = logits(&model, &params, &video);

    let tape = Tape::new();
    let p = params.bind(&tape);
    let patches = tape.constant(vit::patchify(&video, model.cfg.patch).unwrap());
    let mut x = layers::fc(&tape, &p, "patch", patches).unwrap();
    x = tape.add(x, p.get("pos")).unwrap();
    for l in 1..=model.cfg.depth {
        x = mhsa_block(&tape, &p, &format!("blk{l}"), x, model.cfg.heads).unwrap().0;
    }
    let h = layers::norm(&tape, &p, "norm", x).unwrap();
    let h = tape.mean(h, 0).unwrap();
    let h = tape.reshape(h, &[1, 64]).unwrap();
    let expect = layers::fc(&tape, &p, "head", h).unwrap();
    assert_eq!(got.data(), tape.value(expect).data());
}

/// Logits of `model` with patch rows and positional rows both reordered.
fn permuted_logits(model: &ViT, params: &ParamSet, video: &DArray, perm: &[usize]) -> DArray {
    let patches = vit::patchify(video, model.cfg.patch).unwrap();
    let pos = params.get("pos").unwrap();
    let gather = |a: &DArray| {
        let c = a.shape()[1];
        let mut out = DArray::zeros(a.shape());
        for (dst, &src) in perm.iter().enumerate() {
            out.data_mut()[dst * c..(dst + 1) * c].copy_from_slice(&a.data()[src * c..(src + 1) * c]);
        }
        out
    };
    let tape = Tape::new();
    let pairs: Vec<(String, _)> = params
        .iter()
        .map(|(k, a)| {
            let a = if k == "pos" { gather(pos) } else { a.clone() };
            (k.to_string(), tape.constant(a))
        })
        .collect();
    let p = Bound::from_pairs(pairs);
    let x = model.embed(&tape, &p, tape.constant(gather(&patches))).unwrap();
    let out = model.forward_tokens(&tape, &p, x).unwrap();
    let v = tape.value(out.logits).clone();
    v
}

#[test]
fn patch_order_does_not_matter_with_matching_positions() {
    for cfg in [presets::tiny(), presets::tiny_spm()] {
        let model = ViT::new(cfg).unwrap();
        let mut params = model.init_params(5).unwrap();
        // Larger embeddings keep the SPM scores away from the flat sigmoid.
        let w = params.get_mut("patch.w").unwrap();
        *w = DArray::randn(w.shape(), 0.3, &mut cases::rng(6));
        let video = clip(&model.cfg.input, 7);
        let n = model.plan.block_tokens[0];
        let identity: Vec<usize> = (0..n).collect();
        let mut perm = identity.clone();
        perm.reverse();
        perm.swap(3, 100);
        let a = permuted_logits(&model, &params, &video, &identity);
        let b = permuted_logits(&model, &params, &video, &perm);
        assert_eq!(a.data(), logits(&model, &params, &video).data());
        let diff = a.max_abs_diff(&b).unwrap();
        assert!(diff < 1e-10, "{diff:e}");
    }
}

#[test]
fn forward_is_deterministic() {
    let model = ViT::new(presets::tiny_spm()).unwrap();
    let params = model.init_params(1).unwrap();
    let video = clip(&model.cfg.input, 2);
    assert_eq!(logits(&model, &params, &video).data(), logits(&model, &params, &video).data());
    let mvit = MViT::new(presets::mvit_tiny_semantic()).unwrap();
    let mp = mvit.init_params(1).unwrap();
    let run = || {
        let tape = Tape::new();
        let out = mvit.forward(&tape, &mp.bind(&tape), &video).unwrap();
        let v = tape.value(out.logits).clone();
        v
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn reducers_follow_the_plan() {
    let mut cfg = presets::tiny();
    cfg.spm_schedule = vec![
        ScheduleEntry {
            layer: 2,
            reducer: Reducer::MaxPool([2, 2, 2]),
        },
        ScheduleEntry {
            layer: 3,
            reducer: Reducer::AvgPool([1, 2, 2]),
        },
    ];
    let model = ViT::new(cfg).unwrap();
    let params = model.init_params(0).unwrap();
    let tape = Tape::new();
    let video = clip(&model.cfg.input, 1);
    let out = model.forward(&tape, &params.bind(&tape), &video).unwrap();
    let counts: Vec<usize> = out.trace.reduced.iter().map(|(_, v)| tape.shape(*v)[0]).collect();
    assert_eq!(counts, [32, 8]);
    assert_eq!(tape.shape(out.logits), [1, 8]);
}

#[test]
fn spm_trace_records_every_site() {
    let model = ViT::new(presets::tiny_spm()).unwrap();
    let params = model.init_params(0).unwrap();
    let tape = Tape::new();
    let out = model.forward(&tape, &params.bind(&tape), &clip(&model.cfg.input, 1)).unwrap();
    assert_eq!(out.trace.spm.len(), 1);
    let (layer, rec) = &out.trace.spm[0];
    assert_eq!((*layer, rec.tokens_out, rec.kept.len()), (5, 16, 8));
    assert_eq!(tape.shape(out.trace.blocks[5]), [16, 64]);
}

#[test]
fn semantic_blocks_keep_their_grid() {
    let model = MViT::new(presets::mvit_tiny_semantic()).unwrap();
    let params = model.init_params(4).unwrap();
    let tape = Tape::new();
    let out = model.forward(&tape, &params.bind(&tape), &clip(&model.cfg.input, 4)).unwrap();
    for (index, _) in &out.trace.spm {
        let b = &model.plan.blocks[index - 1];
        assert_eq!(out.trace.grids[index - 1], b.grid_in);
        let attn = tape.shape(out.trace.attention[index - 1]);
        assert_eq!(attn, [b.heads, b.q_tokens(), b.kv_tokens()]);
    }
}

#[test]
fn wrong_clip_shape_is_an_argument_error() {
    let model = ViT::new(presets::tiny()).unwrap();
    let params = model.init_params(0).unwrap();
    let tape = Tape::new();
    let r = model.forward(&tape, &params.bind(&tape), &DArray::zeros(&[8, 32, 16, 1]));
    assert!(matches!(r, Err(CoreError::Argument(_))));
}
