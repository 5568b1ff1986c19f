mod common;

use common::{latent_l2, median_relative_deviation, StyleSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylebank_core::cache::CacheKey;
use stylebank_core::distill::{distill, DistillOptions, KPolicy, StyleBank};
use stylebank_core::model::{
    ddim_sample, AttentionHook, ConditionSet, ControlMaps, HookChain, LatentImage, NoHook, SelfAttentionInputs,
    StepContext,
};
use stylebank_core::pipeline::{
    generate_average_image, stylize_full_concat, stylize, stylize_two_stage, InjectionHook, NormStats, StyleInputs,
    StylizeConfig,
};
use stylebank_core::stats::compute_moments;
use stylebank_core::{synth, Error, FeatureMatrix};

fn bank(set: &StyleSet, policy: KPolicy) -> StyleBank {
    distill(
        &set.readers(),
        &DistillOptions {
            k_policy: policy,
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap()
}

#[test]
fn all_interventions_off_is_a_plain_sample() {
    let set = StyleSet::build(1, 2, 16, 4);
    let b = bank(&set, KPolicy::SingleImage);
    let content = synth::content_image(0, 16, 16);
    let off = StylizeConfig {
        steps: 4,
        inject_self: false,
        inject_cross: false,
        align_latents: false,
        lineart_strength: 0.0,
        depth_strength: 0.0,
        seed: 9,
        ..Default::default()
    };
    let out = stylize(&set.model, &content, StyleInputs { source: &b, norm: &set.norm }, &set.phi, &off).unwrap();
    let noise = LatentImage::noise(4, 8, 8, 9);
    let plain = ConditionSet::tokens_only(set.model.encode_prompt(""));
    let reference = ddim_sample(&set.model, &noise, &plain, 4, &mut NoHook).unwrap();
    assert_eq!(&out.latent, reference.clean());

    let with_control = StylizeConfig {
        lineart_strength: 1.2,
        depth_strength: 0.4,
        ..off
    };
    let out = stylize(&set.model, &content, StyleInputs { source: &b, norm: &set.norm }, &set.phi, &with_control).unwrap();
    let cond = ConditionSet {
        control: Some(ControlMaps::from_image(&content, 1.2, 0.4).unwrap()),
        ..plain
    };
    assert_eq!(&out.latent, ddim_sample(&set.model, &noise, &cond, 4, &mut NoHook).unwrap().clean());
}

#[test]
fn injection_toggles_give_distinct_outputs() {
    let set = StyleSet::build(2, 2, 16, 4);
    let b = bank(&set, KPolicy::SingleImage);
    let content = synth::content_image(1, 16, 16);
    let mut outs = Vec::new();
    for (cross, self_) in [(false, false), (true, false), (false, true), (true, true)] {
        let cfg = StylizeConfig {
            steps: 4,
            inject_cross: cross,
            inject_self: self_,
            align_latents: false,
            ..Default::default()
        };
        outs.push(stylize(&set.model, &content, StyleInputs { source: &b, norm: &set.norm }, &set.phi, &cfg).unwrap());
    }
    for i in 0..4 {
        for j in i + 1..4 {
            assert!(latent_l2(&outs[i].latent, &outs[j].latent) > 0.0, "configs {i} and {j} coincide");
        }
    }
}

#[test]
fn saturated_bank_matches_streaming_concatenation() {
    let set = StyleSet::build(3, 3, 16, 4);
    let readers = set.readers();
    let sat = bank(&set, KPolicy::All);
    let cfg = StylizeConfig {
        steps: 4,
        ..Default::default()
    };
    let content = synth::content_image(2, 16, 16);
    let a = stylize(&set.model, &content, StyleInputs { source: &sat, norm: &set.norm }, &set.phi, &cfg).unwrap();
    let b = stylize_full_concat(&set.model, &content, &readers, &set.norm, &set.phi, &cfg).unwrap();
    assert!(a.latent.relative_l2(&b.latent) <= 1e-5);
    assert_eq!(a, b);
}

#[test]
fn single_image_full_bank_matches_single_cache_path() {
    let set = StyleSet::build(4, 1, 16, 3);
    let full = bank(&set, KPolicy::All);
    let cfg = StylizeConfig {
        steps: 3,
        ..Default::default()
    };
    let content = synth::content_image(3, 16, 16);
    let a = stylize(&set.model, &content, StyleInputs { source: &full, norm: &set.norm }, &set.phi, &cfg).unwrap();
    let b = stylize_full_concat(&set.model, &content, &set.readers(), &set.norm, &set.phi, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn distilled_bank_stays_close_to_full_concatenation() {
    let set = StyleSet::build(5, 3, 16, 4);
    let b = bank(&set, KPolicy::SingleImage);
    let cfg = StylizeConfig {
        steps: 4,
        ..Default::default()
    };
    let content = synth::content_image(4, 16, 16);
    let a = stylize(&set.model, &content, StyleInputs { source: &b, norm: &set.norm }, &set.phi, &cfg).unwrap();
    let full = stylize_full_concat(&set.model, &content, &set.readers(), &set.norm, &set.phi, &cfg).unwrap();
    assert!(median_relative_deviation(&a.image, &full.image) <= 0.15);
}

#[test]
fn bank_row_order_does_not_matter() {
    let set = StyleSet::build(6, 2, 16, 3);
    let b = bank(&set, KPolicy::SingleImage);
    let mut shuffled = b.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for e in &mut shuffled.entries {
        let mut order: Vec<usize> = (0..e.k.rows()).collect();
        order.shuffle(&mut rng);
        e.k = e.k.select_rows(&order);
        e.v = e.v.select_rows(&order);
        e.sources = order.iter().map(|&i| e.sources[i]).collect();
    }
    let cfg = StylizeConfig {
        steps: 3,
        ..Default::default()
    };
    let content = synth::content_image(5, 16, 16);
    let a = stylize(&set.model, &content, StyleInputs { source: &b, norm: &set.norm }, &set.phi, &cfg).unwrap();
    let c = stylize(&set.model, &content, StyleInputs { source: &shuffled, norm: &set.norm }, &set.phi, &cfg).unwrap();
    let diff = a
        .latent
        .as_slice()
        .iter()
        .zip(c.latent.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(diff <= 1e-6, "max abs diff {diff}");
}

#[test]
fn latents_follow_captured_statistics() {
    let set = StyleSet::build(7, 2, 16, 4);
    let b = bank(&set, KPolicy::SingleImage);
    let cfg = StylizeConfig {
        steps: 4,
        ..Default::default()
    };
    let out = stylize(&set.model, &synth::content_image(6, 16, 16), StyleInputs { source: &b, norm: &set.norm }, &set.phi, &cfg).unwrap();
    assert_eq!(out.trajectory.len(), 4);
    for (latent, target) in out.trajectory.iter().zip(&set.norm.latents) {
        let m = compute_moments(&latent.to_tokens()).unwrap();
        for c in 0..m.channels() {
            assert!((m.mean[c] - target.mean[c]).abs() <= 1e-4 * target.mean[c].abs().max(1.0));
            assert!((m.variance[c] - target.variance[c]).abs() <= 1e-4 * target.variance[c].max(1e-3));
        }
    }
}

/// Checks the aligned queries it receives against the captured stats.
struct QueryProbe<'a> {
    norm: &'a NormStats,
    checked: usize,
}

impl AttentionHook<f32> for QueryProbe<'_> {
    fn self_attention(&mut self, site: CacheKey, qkv: &mut SelfAttentionInputs<f32>) -> stylebank_core::Result<()> {
        let m = compute_moments(&qkv.q)?;
        let t = &self.norm.q[&site];
        for c in 0..m.channels() {
            assert!((m.mean[c] - t.mean[c]).abs() <= 1e-4 * t.mean[c].abs().max(1.0));
            assert!((m.variance[c] - t.variance[c]).abs() <= 1e-4 * t.variance[c].max(1e-3));
        }
        self.checked += 1;
        Ok(())
    }
}

#[test]
fn injected_queries_match_captured_statistics() {
    let set = StyleSet::build(8, 2, 16, 2);
    let b = bank(&set, KPolicy::SingleImage);
    let cfg = StylizeConfig {
        steps: 2,
        ..Default::default()
    };
    let mut inject = InjectionHook::new(StyleInputs { source: &b, norm: &set.norm }, &cfg);
    let mut probe = QueryProbe {
        norm: &set.norm,
        checked: 0,
    };
    let mut chain = HookChain(vec![&mut inject, &mut probe]);
    let x = LatentImage::noise(4, 8, 8, 3);
    let cond = ConditionSet::tokens_only(set.model.encode_prompt(""));
    for index in 0..2 {
        let step = StepContext {
            index,
            timestep: set.model.schedule().timesteps(2)[index],
        };
        set.model.denoise_step(&x, step, &cond, &mut chain).unwrap();
    }
    drop(chain);
    assert_eq!(probe.checked, 2 * 2 * 2);
}

#[test]
fn two_stage_boundaries() {
    let lo = StyleSet::build(9, 2, 16, 4);
    let hi = StyleSet::build(9, 2, 32, 4);
    let bank_lo = bank(&lo, KPolicy::SingleImage);
    let bank_hi = bank(&hi, KPolicy::SingleImage);
    let low = StyleInputs { source: &bank_lo, norm: &lo.norm };
    let high = StyleInputs { source: &bank_hi, norm: &hi.norm };
    let content = synth::content_image(7, 32, 32);
    let model = &lo.model;

    let f0 = StylizeConfig {
        steps: 4,
        structure_fraction: 0.0,
        ..Default::default()
    };
    let two = stylize_two_stage(model, &content, low, high, &lo.phi, &f0).unwrap();
    assert_eq!(two, stylize(model, &content, high, &lo.phi, &f0).unwrap());

    let f1 = StylizeConfig {
        structure_fraction: 1.0,
        ..f0.clone()
    };
    let two = stylize_two_stage(model, &content, low, high, &lo.phi, &f1).unwrap();
    let small = stylize(model, &content.downscale_box(2).unwrap(), low, &lo.phi, &f1).unwrap();
    let up = small.latent.upsample_bilinear(2).unwrap();
    assert_eq!(two.latent, up);
    assert_eq!(two.image, model.codec().decode(&up).unwrap());

    let mid = StylizeConfig {
        structure_fraction: 0.3,
        ..f0
    };
    let a = stylize_two_stage(model, &content, low, high, &lo.phi, &mid).unwrap();
    assert_eq!((a.image.width(), a.image.height()), (32, 32));
    assert_eq!(a.trajectory.len(), 4);
    assert_eq!(a.trajectory[1].height(), 8);
    assert_eq!(a.trajectory[2].height(), 16);
    assert_eq!(a, stylize_two_stage(model, &content, low, high, &lo.phi, &mid).unwrap());

    let odd = StylizeConfig {
        low_res: Some([12, 12]),
        ..mid
    };
    assert!(stylize_two_stage(model, &content, low, high, &lo.phi, &odd).is_err());
}

#[test]
fn mismatches_are_reported() {
    let set = StyleSet::build(10, 1, 16, 3);
    let b = bank(&set, KPolicy::SingleImage);
    let content = synth::content_image(8, 16, 16);
    let cfg = StylizeConfig {
        steps: 4,
        ..Default::default()
    };
    assert!(stylize(&set.model, &content, StyleInputs { source: &b, norm: &set.norm }, &set.phi, &cfg).is_err());

    let mut partial = b.clone();
    partial.entries.retain(|e| e.key != CacheKey::new(1, 1, 0));
    let cfg = StylizeConfig {
        steps: 3,
        ..Default::default()
    };
    let err = stylize(&set.model, &content, StyleInputs { source: &partial, norm: &set.norm }, &set.phi, &cfg).unwrap_err();
    assert!(matches!(err, Error::EntryNotFound(k) if k == CacheKey::new(1, 1, 0)));
    assert!(err.to_string().contains("(1,1,0)"));

    let bad = StylizeConfig {
        structure_fraction: 1.5,
        ..cfg
    };
    assert!(bad.validate().is_err());
}

#[test]
fn average_image_and_stats() {
    let set = StyleSet::build(11, 1, 16, 3);
    let (img, norm) = generate_average_image(&set.model, &set.phi, 3, 4, (6, 6)).unwrap();
    let again = generate_average_image(&set.model, &set.phi, 3, 4, (6, 6)).unwrap();
    assert_eq!((img.clone(), norm.clone()), again);
    assert_eq!(norm.q.len(), 2 * 3 * 2);
    assert_eq!(norm.k.len(), 2 * 3 * 2);
    assert_eq!(norm.latents.len(), 3);
    assert!(norm.q.values().chain(norm.k.values()).chain(&norm.latents).all(|s| s.variance.iter().all(|&v| v >= 0.0)));

    let path = set.dir.path().join("n.snrm");
    norm.save(&path).unwrap();
    assert_eq!(NormStats::load(&path).unwrap(), norm);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(NormStats::load(&path), Err(Error::Malformed { .. })));
    std::fs::write(&path, b"SKVC").unwrap();
    assert!(matches!(NormStats::load(&path), Err(Error::BadMagic { .. })));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let set = StyleSet::build(12, 3, 16, 3);
    let readers = set.readers();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let b = distill(&readers, &DistillOptions::default()).unwrap();
            let cfg = StylizeConfig {
                steps: 3,
                ..Default::default()
            };
            let out = stylize(&set.model, &synth::content_image(1, 16, 16), StyleInputs { source: &b, norm: &set.norm }, &set.phi, &cfg).unwrap();
            (b, out)
        })
    };
    assert_eq!(run(1), run(8));
}

#[test]
fn condition_tokens_shape() {
    let set = StyleSet::build(13, 1, 8, 1);
    let tokens = stylebank_core::embedding::condition_tokens(&set.model, "", &set.phi).unwrap();
    assert_eq!((tokens.rows(), tokens.cols()), (8, 16));
    let _: &FeatureMatrix = &tokens;
}
