use mdc_core::autodiff::Tensor;
use mdc_core::model::{decode_logits, encode, pool_gap, AttentionMode, DecodeOptions, Image, ModelConfig, ModelParams, VisualFeatures};
use mdc_core::rng::{normal, seeded};
use mdc_core::vocab::PAD;
use rand::Rng;

fn params(mode: AttentionMode, seed: u64) -> ModelParams<f64> {
    let mut cfg = ModelConfig::compact(18, mode);
    cfg.encoder.layers = 1;
    cfg.decoder.layers = 1;
    ModelParams::init(&cfg, &mut seeded(seed)).unwrap()
}

/// Random init is close to uniform; scale everything up so perturbations
/// show clearly.
fn sharpened(mut p: ModelParams<f64>) -> ModelParams<f64> {
    let mut rng = seeded(99);
    let names = p.names().to_vec();
    for (name, t) in names.iter().zip(p.tensors_mut()) {
        if !name.ends_with(".g") {
            t.data_mut().iter_mut().for_each(|v| *v += 0.3 * normal(&mut rng));
        }
    }
    p
}

fn random_image(seed: u64) -> Image {
    let mut rng = seeded(seed);
    Image::new(32, 32, (0..32 * 32 * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

#[test]
fn encoder_output_shape_standard_config() {
    let cfg = ModelConfig::standard(18, AttentionMode::Bidirectional);
    let p = ModelParams::<f32>::init(&cfg, &mut seeded(0)).unwrap();
    let v = encode(&Image::zeros(32, 32), &p).unwrap();
    assert_eq!(v.features.shape(), [64, 64]);
}

#[test]
fn encoder_is_deterministic_and_sensitive() {
    let p = params(AttentionMode::Bidirectional, 1);
    let zero = Image::zeros(32, 32);
    let a = encode(&zero, &p).unwrap();
    let b = encode(&zero, &p).unwrap();
    assert_eq!(a, b);
    assert!(a.features.is_finite());
    let mut one_patch = zero.clone();
    for y in 0..8 {
        for x in 8..16 {
            one_patch.data[(y * 32 + x) * 3] = 1.0;
        }
    }
    assert_ne!(encode(&one_patch, &p).unwrap(), a);
    assert!(encode(&Image::zeros(16, 32), &p).is_err());
    assert!(Image::new(2, 2, vec![2.0; 12]).is_err());
}

#[test]
fn causal_logits_ignore_current_and_later_tokens() {
    let p = sharpened(params(AttentionMode::Causal, 2));
    let v = encode(&random_image(3), &p).unwrap();
    let opts = DecodeOptions::new(AttentionMode::Causal);
    let base: Vec<u32> = vec![4, 5, 6, 7, 8, 9, 10, 11, 3, PAD];
    let ref_logits = decode_logits(&base, &v, &p, opts).unwrap();
    assert_eq!(ref_logits.shape(), [10, 18]);
    for j in 0..9 {
        let mut toks = base.clone();
        toks[j] = 15;
        let l = decode_logits(&toks, &v, &p, opts).unwrap();
        for i in 0..=j {
            assert_eq!(l.row(i), ref_logits.row(i), "position {i} changed when token {j} moved");
        }
        assert_ne!(l.row(j + 1), ref_logits.row(j + 1));
    }
}

#[test]
fn bidirectional_logits_see_the_whole_sequence() {
    let p = sharpened(params(AttentionMode::Bidirectional, 4));
    let v = encode(&random_image(5), &p).unwrap();
    let opts = DecodeOptions::new(AttentionMode::Bidirectional);
    let base: Vec<u32> = vec![4, 1, 6, 1, 8, PAD];
    let ref_logits = decode_logits(&base, &v, &p, opts).unwrap();
    for j in 0..5 {
        let mut toks = base.clone();
        toks[j] = 12;
        let l = decode_logits(&toks, &v, &p, opts).unwrap();
        assert!((0..5).filter(|&i| i != j).any(|i| l.row(i) != ref_logits.row(i)));
    }
}

#[test]
fn zeroing_visual_features_changes_logits() {
    let p = sharpened(params(AttentionMode::Bidirectional, 6));
    let v = encode(&random_image(7), &p).unwrap();
    let toks = [4u32, 1, 1, 7];
    let on = decode_logits(&toks, &v, &p, DecodeOptions::new(AttentionMode::Bidirectional)).unwrap();
    let off = decode_logits(
        &toks,
        &v,
        &p,
        DecodeOptions {
            mode: AttentionMode::Bidirectional,
            visual: false,
        },
    )
    .unwrap();
    assert_ne!(on, off);
}

#[test]
fn decoder_contract_errors() {
    let p = params(AttentionMode::Bidirectional, 8);
    let v = encode(&Image::zeros(32, 32), &p).unwrap();
    let opts = DecodeOptions::new(AttentionMode::Bidirectional);
    assert!(decode_logits(&[4, 18], &v, &p, opts).is_err());
    assert!(decode_logits(&[4; 17], &v, &p, opts).is_err());
    let out = decode_logits(&[4; 16], &v, &p, opts).unwrap();
    assert_eq!(out.shape(), [16, 18]);
}

#[test]
fn no_time_parameters_and_repeatable_calls() {
    let p = params(AttentionMode::Bidirectional, 9);
    assert!(p.names().iter().all(|n| !n.contains("time")));
    let v = encode(&random_image(1), &p).unwrap();
    let opts = DecodeOptions::new(AttentionMode::Bidirectional);
    let toks = [4u32, 1, 6, 1, PAD];
    assert_eq!(decode_logits(&toks, &v, &p, opts).unwrap(), decode_logits(&toks, &v, &p, opts).unwrap());
}

#[test]
fn gap_pooling() {
    let same = VisualFeatures {
        features: Tensor::new(&[3, 2], vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap(),
    };
    assert_eq!(pool_gap(&same), [1.5, -2.0]);
    let two = VisualFeatures {
        features: Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 3.0, 4.0, -1.0]).unwrap(),
    };
    assert_eq!(pool_gap(&two), [2.0, 3.0, 1.0]);
    let mut rng = seeded(3);
    let rows: Vec<f64> = (0..5 * 4).map(|_| normal(&mut rng)).collect();
    let v = VisualFeatures {
        features: Tensor::new(&[5, 4], rows.clone()).unwrap(),
    };
    let mut permuted = Vec::new();
    for r in [3, 0, 4, 1, 2] {
        permuted.extend_from_slice(&rows[r * 4..(r + 1) * 4]);
    }
    let pv = VisualFeatures {
        features: Tensor::new(&[5, 4], permuted).unwrap(),
    };
    for (a, b) in pool_gap(&v).iter().zip(pool_gap(&pv)) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn init_follows_the_manifest() {
    let p = params(AttentionMode::Bidirectional, 10);
    assert_eq!(p.get("dec.0.self.ln.g").unwrap().data().iter().filter(|&&x| x != 1.0).count(), 0);
    assert!(p.get("dec.0.cross.bq").unwrap().data().iter().all(|&x| x == 0.0));
    assert!(p.get("enc.patch.w").unwrap().data().iter().all(|&x| x.abs() <= 0.04));
    assert!(p.first_non_finite().is_none());
    let cast = p.cast::<f32>().cast::<f64>();
    assert_eq!(cast.names(), p.names());
}
